//! Preference-guided social edge re-weighting.
//!
//! A two-layer network scores each social pair from the users' initial
//! embeddings. The score is pushed through a concrete (relaxed Bernoulli)
//! sample and an additive observation bias to give the edge weight used in the
//! denoised graph.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Clamp applied to the confidence before it enters the relaxation.
pub const CONFIDENCE_CLAMP: f64 = 1e-6;

/// Noise value used for deterministic (evaluation-time) weights.
pub const MEDIAN_DELTA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One fresh uniform draw per edge.
    Stochastic,
    /// The median of the noise, `δ = 0.5`.
    Deterministic,
}

/// Confidence network `3d → d → 1` plus the relaxation constants.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    /// `d × 3d`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
    pub temperature: f64,
    pub observation_bias: f64,
}

impl DenoiserParams {
    pub fn zeros(dim: usize, temperature: f64, observation_bias: f64) -> Self {
        Self {
            w1: Array2::zeros((dim, 3 * dim)),
            b1: Array1::zeros(dim),
            w2: Array1::zeros(dim),
            b2: 0.0,
            temperature,
            observation_bias,
        }
    }

    /// Gaussian weights with the given standard deviation, zero biases.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        std: f64,
        temperature: f64,
        observation_bias: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let mut p = Self::zeros(dim, temperature, observation_bias);
        p.w1.iter_mut().for_each(|x| *x = normal.sample(rng));
        p.w2.iter_mut().for_each(|x| *x = normal.sample(rng));
        p
    }

    pub fn dim(&self) -> usize {
        self.b1.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.w1.dim() != (d, 3 * d) || self.w2.len() != d {
            return Err(Error::Shape(format!(
                "denoiser layers {:?} / {} inconsistent with hidden width {d}",
                self.w1.dim(),
                self.w2.len()
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.observation_bias) {
            return Err(Error::Config(format!(
                "observation bias {} outside [0, 1]",
                self.observation_bias
            )));
        }
        let finite = self.w1.iter().chain(self.b1.iter()).chain(self.w2.iter()).all(|x| x.is_finite())
            && self.b2.is_finite();
        if !finite {
            return Err(Error::Numeric("non-finite denoiser parameter".into()));
        }
        Ok(())
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn pair_features(e_a: ArrayView1<'_, f64>, e_b: ArrayView1<'_, f64>, out: &mut [f64]) {
    let d = e_a.len();
    for k in 0..d {
        out[k] = e_a[k];
        out[d + k] = e_b[k];
        out[2 * d + k] = e_a[k] * e_b[k];
    }
}

/// Keep-confidence of a social pair in `(0, 1)`. Callers feed the pair in
/// canonical order (lower user id first); see [`pair_confidence`].
pub fn edge_confidence(
    params: &DenoiserParams,
    e_a: ArrayView1<'_, f64>,
    e_b: ArrayView1<'_, f64>,
) -> f64 {
    let d = params.dim();
    let mut x = vec![0.0; 3 * d];
    pair_features(e_a, e_b, &mut x);
    let x = ArrayView1::from(&x);
    let hidden = (params.w1.dot(&x) + &params.b1).mapv(f64::tanh);
    logistic(params.w2.dot(&hidden) + params.b2)
}

/// [`edge_confidence`] for users `a` and `b`, ordered by id.
pub fn pair_confidence(
    params: &DenoiserParams,
    users: ArrayView2<'_, f64>,
    a: usize,
    b: usize,
) -> f64 {
    let (lo, hi) = (a.min(b), a.max(b));
    edge_confidence(params, users.row(lo), users.row(hi))
}

/// Concrete relaxation `σ((log(δ/(1−δ)) + w) / t)`, with `w` clamped away
/// from 0 and 1.
pub fn relax_sample(confidence: f64, delta: f64, temperature: f64) -> f64 {
    let w = confidence.clamp(CONFIDENCE_CLAMP, 1.0 - CONFIDENCE_CLAMP);
    logistic(((delta / (1.0 - delta)).ln() + w) / temperature)
}

/// Uniform `(0, 1)` draws, one per social edge.
pub fn draw_deltas<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        })
        .collect()
}

/// Per-edge confidence `w` and relaxed weight `ρ` for every social edge of a
/// dataset, aligned with [`Dataset::social_edges`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConfidenceMap {
    edges: Vec<(usize, usize)>,
    confidence: Vec<f64>,
    relaxed: Vec<f64>,
}

impl EdgeConfidenceMap {
    pub fn new(edges: Vec<(usize, usize)>, confidence: Vec<f64>, relaxed: Vec<f64>) -> Result<Self> {
        if edges.len() != confidence.len() || edges.len() != relaxed.len() {
            return Err(Error::Shape("edge, confidence and weight counts differ".into()));
        }
        if let Some(x) = confidence.iter().chain(relaxed.iter()).find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Data(format!("edge value {x} outside [0, 1]")));
        }
        Ok(Self {
            edges,
            confidence,
            relaxed,
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn relaxed(&self) -> &[f64] {
        &self.relaxed
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// `(ρ_ab, w_ab)` for the pair, `None` when `{a, b}` is not a social edge.
    pub fn get(&self, a: usize, b: usize) -> Option<(f64, f64)> {
        let k = self.edges.binary_search(&(a.min(b), a.max(b))).ok()?;
        Some((self.relaxed[k], self.confidence[k]))
    }

    /// Mean and population variance of the confidences.
    pub fn confidence_stats(&self) -> (f64, f64) {
        if self.confidence.is_empty() {
            return (0.0, 0.0);
        }
        let n = self.confidence.len() as f64;
        let mean = self.confidence.iter().sum::<f64>() / n;
        let var = self.confidence.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    /// CSV `user_a,user_b,confidence,relaxed_weight` with original user ids.
    pub fn to_csv(&self, dataset: &Dataset) -> String {
        let mut out = String::from("user_a,user_b,confidence,relaxed_weight\n");
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                dataset.user_label(a),
                dataset.user_label(b),
                self.confidence[k],
                self.relaxed[k]
            );
        }
        out
    }

    pub fn export_csv(&self, dataset: &Dataset, path: &Path) -> Result<()> {
        crate::io::atomic_write(path, self.to_csv(dataset).as_bytes())
    }
}

/// Intermediate values of a denoiser pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DenoiserForward {
    /// `E × 3d` pair features.
    features: Array2<f64>,
    /// `E × d` post-activation hidden units.
    hidden: Array2<f64>,
    confidence: Vec<f64>,
    /// Relaxed sample before the observation bias.
    sample: Vec<f64>,
    weights: Vec<f64>,
}

impl DenoiserForward {
    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    /// `ρ = min(1, sample + ε)` per edge.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Runs the confidence network and relaxation over all social edges with the
/// given noise draws (one per edge).
pub fn forward(
    params: &DenoiserParams,
    user_embeddings: ArrayView2<'_, f64>,
    edges: &[(usize, usize)],
    deltas: &[f64],
) -> Result<DenoiserForward> {
    let d = params.dim();
    if user_embeddings.ncols() != d {
        return Err(Error::Shape(format!(
            "user embeddings have width {}, denoiser expects {d}",
            user_embeddings.ncols()
        )));
    }
    if deltas.len() != edges.len() {
        return Err(Error::Shape(format!(
            "{} noise draws for {} edges",
            deltas.len(),
            edges.len()
        )));
    }
    let mut features = Array2::zeros((edges.len(), 3 * d));
    for (mut row, &(a, b)) in features.axis_iter_mut(Axis(0)).zip(edges) {
        let (lo, hi) = (a.min(b), a.max(b));
        pair_features(
            user_embeddings.row(lo),
            user_embeddings.row(hi),
            row.as_slice_mut().expect("row-major"),
        );
    }
    let mut hidden = features.dot(&params.w1.t());
    hidden += &params.b1;
    hidden.mapv_inplace(f64::tanh);
    let logits = hidden.dot(&params.w2);
    let confidence: Vec<f64> = logits.iter().map(|&o| logistic(o + params.b2)).collect();
    let sample: Vec<f64> = confidence
        .iter()
        .zip(deltas)
        .map(|(&w, &delta)| relax_sample(w, delta, params.temperature))
        .collect();
    let weights = sample
        .iter()
        .map(|&r| (r + params.observation_bias).min(1.0))
        .collect();
    Ok(DenoiserForward {
        features,
        hidden,
        confidence,
        sample,
        weights,
    })
}

/// Edge confidences and weights for a dataset's social graph. Non-edges are
/// never created: the map's keys are exactly the dataset's social edges.
pub fn denoise<R: Rng + ?Sized>(
    params: &DenoiserParams,
    user_embeddings: ArrayView2<'_, f64>,
    dataset: &Dataset,
    mode: Mode,
    rng: &mut R,
) -> Result<EdgeConfidenceMap> {
    if user_embeddings.nrows() != dataset.user_count() {
        return Err(Error::Shape(format!(
            "{} user rows for {} users",
            user_embeddings.nrows(),
            dataset.user_count()
        )));
    }
    let edges = dataset.social_edges();
    let deltas = match mode {
        Mode::Stochastic => draw_deltas(edges.len(), rng),
        Mode::Deterministic => vec![MEDIAN_DELTA; edges.len()],
    };
    let fwd = forward(params, user_embeddings, edges, &deltas)?;
    EdgeConfidenceMap::new(edges.to_vec(), fwd.confidence, fwd.weights)
}

/// Gradients of the denoiser parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

/// Back-propagates `∂L/∂ρ` through the relaxation and the confidence network.
/// Returns parameter gradients and adds the input gradients into the user
/// rows of `grad_users`.
pub fn backward(
    params: &DenoiserParams,
    fwd: &DenoiserForward,
    user_embeddings: ArrayView2<'_, f64>,
    edges: &[(usize, usize)],
    grad_weights: &[f64],
    mut grad_users: ndarray::ArrayViewMut2<'_, f64>,
) -> DenoiserGrads {
    let d = params.dim();
    let t = params.temperature;
    // ∂L/∂logit per edge
    let grad_logit: Array1<f64> = (0..edges.len())
        .map(|k| {
            if fwd.sample[k] + params.observation_bias >= 1.0 {
                return 0.0;
            }
            let w = fwd.confidence[k];
            if w <= CONFIDENCE_CLAMP || w >= 1.0 - CONFIDENCE_CLAMP {
                return 0.0;
            }
            let r = fwd.sample[k];
            grad_weights[k] * r * (1.0 - r) / t * w * (1.0 - w)
        })
        .collect();

    let w2 = fwd.hidden.t().dot(&grad_logit);
    let b2 = grad_logit.sum();
    // ∂L/∂pre-activation, E × d
    let mut grad_pre = Array2::zeros((edges.len(), d));
    for ((mut row, h), &g) in grad_pre
        .axis_iter_mut(Axis(0))
        .zip(fwd.hidden.axis_iter(Axis(0)))
        .zip(grad_logit.iter())
    {
        if g == 0.0 {
            continue;
        }
        for k in 0..d {
            row[k] = g * params.w2[k] * (1.0 - h[k] * h[k]);
        }
    }
    let w1 = grad_pre.t().dot(&fwd.features);
    let b1 = grad_pre.sum_axis(Axis(0));
    let grad_features = grad_pre.dot(&params.w1);

    for (k, &(a, b)) in edges.iter().enumerate() {
        if grad_logit[k] == 0.0 {
            continue;
        }
        let (lo, hi) = (a.min(b), a.max(b));
        let gx = grad_features.row(k);
        let e_lo = user_embeddings.row(lo).to_owned();
        let e_hi = user_embeddings.row(hi).to_owned();
        let prod = gx.slice(s![2 * d..]);
        {
            let mut g = grad_users.row_mut(lo);
            g += &gx.slice(s![..d]);
            g += &(&prod * &e_hi);
        }
        {
            let mut g = grad_users.row_mut(hi);
            g += &gx.slice(s![d..2 * d]);
            g += &(&prod * &e_lo);
        }
    }

    DenoiserGrads { w1, b1, w2, b2 }
}
