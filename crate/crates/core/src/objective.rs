//! Ranking loss, regularization, the bottleneck-weighted total, and exact
//! gradients for every trainable parameter.
//!
//! The forward pass for one batch is
//! `E⁰ → edge confidences → relaxed weights → weighted normalization →
//! propagation → readout → scores / HSIC`, and [`Objective::loss_and_gradients`]
//! walks it backwards by hand. Noise draws are inputs, so gradients are those
//! of the reparameterized objective.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, EmbeddingTable, NodeRepresentations};
use crate::data::{Dataset, TrainingTriple};
use crate::denoiser::{self, DenoiserGrads, DenoiserParams};
use crate::error::{Error, Result};
use crate::graph::WeightedAdjacency;
use crate::hsic::{self, HsicBatch};

/// Score margins are clamped to this magnitude before the log-sigmoid.
pub const MARGIN_CLAMP: f64 = 40.0;

/// `softplus(x) = log(1 + eˣ)`, stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean of `−log σ(pos − neg)` over the batch.
pub fn bpr_loss(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.len() != scores_neg.len() {
        return Err(Error::Shape(format!(
            "{} positive vs {} negative scores",
            scores_pos.len(),
            scores_neg.len()
        )));
    }
    if scores_pos.is_empty() {
        return Err(Error::Shape("empty score batch".into()));
    }
    let sum: f64 = scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(p, n)| softplus(-(p - n).clamp(-MARGIN_CLAMP, MARGIN_CLAMP)))
        .sum();
    Ok(sum / scores_pos.len() as f64)
}

/// Components of the objective for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr_loss: f64,
    /// `λ‖E⁰‖²`
    pub reg_loss: f64,
    /// `bpr_loss + reg_loss`
    pub rec_loss: f64,
    /// Raw HSIC value, before `β`.
    pub ib_loss: f64,
    /// `rec_loss + β·ib_loss`
    pub total: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.bpr_loss, self.reg_loss, self.ib_loss, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Combines the ranking loss, `λ‖E⁰‖²_F` and `β·HSIC`.
pub fn total_loss(bpr: f64, hsic: f64, embeddings: ArrayView2<'_, f64>, beta: f64, lambda: f64) -> LossBreakdown {
    let reg_loss = lambda * embeddings.iter().map(|x| x * x).sum::<f64>();
    let rec_loss = bpr + reg_loss;
    LossBreakdown {
        bpr_loss: bpr,
        reg_loss,
        rec_loss,
        ib_loss: hsic,
        total: rec_loss + beta * hsic,
        beta,
        lambda,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub lambda: f64,
    pub sigma2: f64,
    /// L2-normalize representation rows before the kernel.
    pub normalize_kernel: bool,
    /// Stop gradients through the original-graph branch of the bottleneck.
    pub detach_original: bool,
}

/// Trainable parameters: `θ = E⁰` and the denoiser `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub table: EmbeddingTable,
    pub denoiser: DenoiserParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub embeddings: Array2<f64>,
    pub denoiser: DenoiserGrads,
}

/// What one evaluation of the objective did, besides its value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    /// Number of HSIC estimates computed.
    pub hsic_evaluations: usize,
}

/// Objective bound to a dataset and backbone. The original-graph adjacency is
/// built once.
pub struct Objective<'a> {
    backbone: &'a dyn Backbone,
    dataset: &'a Dataset,
    original: WeightedAdjacency,
    config: ObjectiveConfig,
}

impl<'a> Objective<'a> {
    pub fn new(backbone: &'a dyn Backbone, dataset: &'a Dataset, config: ObjectiveConfig) -> Result<Self> {
        if !(config.sigma2 > 0.0) {
            return Err(Error::Config(format!("sigma2 must be positive, got {}", config.sigma2)));
        }
        if !(config.beta >= 0.0) || !(config.lambda >= 0.0) {
            return Err(Error::Config("beta and lambda must be non-negative".into()));
        }
        Ok(Self {
            backbone,
            dataset,
            original: backbone.adjacency(dataset, None)?,
            config,
        })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    /// Whether the denoiser shapes the graph this backbone propagates over.
    pub fn denoises(&self) -> bool {
        self.backbone.uses_social() && !self.dataset.social_edges().is_empty()
    }

    pub fn loss(&self, params: &ModelParams, batch: &[TrainingTriple], deltas: &[f64]) -> Result<LossBreakdown> {
        Ok(self.run(params, batch, deltas, false, None)?.0)
    }

    pub fn loss_and_gradients(
        &self,
        params: &ModelParams,
        batch: &[TrainingTriple],
        deltas: &[f64],
    ) -> Result<(LossBreakdown, ModelGrads, StepStats)> {
        let (loss, grads, stats) = self.run(params, batch, deltas, true, None)?;
        Ok((loss, grads.expect("requested"), stats))
    }

    /// Like [`Objective::run`] but with the original-graph readout supplied as
    /// a constant. Used to check the detached gradient path.
    #[cfg(test)]
    fn loss_with_frozen_original(
        &self,
        params: &ModelParams,
        batch: &[TrainingTriple],
        deltas: &[f64],
        original: &Array2<f64>,
    ) -> Result<LossBreakdown> {
        Ok(self.run(params, batch, deltas, false, Some(original))?.0)
    }

    fn run(
        &self,
        params: &ModelParams,
        batch: &[TrainingTriple],
        deltas: &[f64],
        want_grad: bool,
        frozen_original: Option<&Array2<f64>>,
    ) -> Result<(LossBreakdown, Option<ModelGrads>, StepStats)> {
        let table = &params.table;
        let cfg = &self.config;
        let edges = self.dataset.social_edges();
        let mut stats = StepStats::default();

        let den = if self.denoises() {
            Some(denoiser::forward(&params.denoiser, table.users(), edges, deltas)?)
        } else {
            None
        };
        let denoised_adj;
        let adj = match &den {
            Some(fwd) => {
                denoised_adj = self.backbone.adjacency(self.dataset, Some(fwd.weights()))?;
                &denoised_adj
            }
            None => &self.original,
        };
        let reps = self.backbone.forward(table, adj)?;

        // ranking loss on the denoised graph
        let m = table.user_count;
        let r = &reps.readout;
        let mut margins = Vec::with_capacity(batch.len());
        for t in batch {
            let u = r.row(t.user);
            margins.push(u.dot(&r.row(m + t.positive)) - u.dot(&r.row(m + t.negative)));
        }
        let zeros = vec![0.0; margins.len()];
        let bpr = bpr_loss(&margins, &zeros)?;

        // bottleneck between denoised and original representations
        let users: Vec<usize> = batch.iter().map(|t| t.user).collect();
        let mut ib = 0.0;
        let mut ib_grads = None;
        let mut original_reps: Option<NodeRepresentations> = None;
        if cfg.beta > 0.0 && self.denoises() {
            let original_readout = match frozen_original {
                Some(o) => o.clone(),
                None => {
                    let o = self.backbone.forward(table, &self.original)?;
                    let readout = o.readout.clone();
                    original_reps = Some(o);
                    readout
                }
            };
            let users_only = |a: &Array2<f64>| a.slice(ndarray::s![..m, ..]).to_owned();
            // A batch with a single distinct user carries no dependence signal.
            match HsicBatch::gather(users_only(r).view(), users_only(&original_readout).view(), &users) {
                Ok(hb) => {
                    let (value, grads) = hsic::bottleneck_with_grad(&hb, cfg.sigma2, cfg.normalize_kernel, want_grad)?;
                    stats.hsic_evaluations += 1;
                    ib = value;
                    ib_grads = grads.map(|g| (hb.users, g));
                }
                Err(Error::Data(_)) if distinct_count(&users) < 2 => {}
                Err(e) => return Err(e),
            }
        }

        let loss = total_loss(bpr, ib, table.embeddings.view(), cfg.beta, cfg.lambda);
        if !want_grad {
            return Ok((loss, None, stats));
        }

        // ∂L/∂readout of the denoised branch
        let mut g_readout = Array2::zeros(r.dim());
        let inv_b = 1.0 / batch.len() as f64;
        for (t, &x) in batch.iter().zip(&margins) {
            if x.abs() > MARGIN_CLAMP {
                continue;
            }
            // d/dx softplus(−x) = −σ(−x)
            let gx = -denoiser::logistic(-x) * inv_b;
            let (pu, pi, pj) = (t.user, m + t.positive, m + t.negative);
            let diff = &r.row(pi) - &r.row(pj);
            g_readout.row_mut(pu).scaled_add(gx, &diff);
            let user_row = r.row(pu).to_owned();
            g_readout.row_mut(pi).scaled_add(gx, &user_row);
            g_readout.row_mut(pj).scaled_add(-gx, &user_row);
        }
        let mut g_original_users: Option<(Vec<usize>, Array2<f64>)> = None;
        if let Some((users, (gx, gy))) = ib_grads {
            for (k, &u) in users.iter().enumerate() {
                g_readout.row_mut(u).scaled_add(cfg.beta, &gx.row(k));
            }
            if !cfg.detach_original {
                g_original_users = Some((users, gy * cfg.beta));
            }
        }

        let bb = self.backbone.backward(adj, &reps, g_readout.view(), den.is_some());
        let mut g_e0 = bb.embeddings;
        g_e0.zip_mut_with(&table.embeddings, |g, &e| *g += 2.0 * cfg.lambda * e);

        if let (Some((users, gy)), Some(orig)) = (g_original_users, original_reps.as_ref()) {
            let mut g = Array2::zeros(orig.readout.dim());
            for (k, &u) in users.iter().enumerate() {
                g.row_mut(u).assign(&gy.row(k));
            }
            let ob = self.backbone.backward(&self.original, orig, g.view(), false);
            g_e0 += &ob.embeddings;
        }

        let d = table.dim();
        let denoiser_grads = match (&den, bb.adjacency) {
            (Some(fwd), Some(entry)) => {
                let g_weights = adj.social_weight_grad(&entry);
                let mut g_users = g_e0.slice_mut(ndarray::s![..m, ..]);
                let users_view = table.users();
                denoiser::backward(
                    &params.denoiser,
                    fwd,
                    users_view,
                    edges,
                    &g_weights,
                    g_users.view_mut(),
                )
            }
            _ => DenoiserGrads {
                w1: Array2::zeros((d, 3 * d)),
                b1: ndarray::Array1::zeros(d),
                w2: ndarray::Array1::zeros(d),
                b2: 0.0,
            },
        };

        let grads = ModelGrads {
            embeddings: g_e0,
            denoiser: denoiser_grads,
        };
        check_finite(&grads)?;
        Ok((loss, Some(grads), stats))
    }
}

fn distinct_count(users: &[usize]) -> usize {
    let mut u = users.to_vec();
    u.sort_unstable();
    u.dedup();
    u.len()
}

fn check_finite(g: &ModelGrads) -> Result<()> {
    let blocks: [(&str, Box<dyn Iterator<Item = &f64>>); 5] = [
        ("embeddings", Box::new(g.embeddings.iter())),
        ("denoiser.w1", Box::new(g.denoiser.w1.iter())),
        ("denoiser.b1", Box::new(g.denoiser.b1.iter())),
        ("denoiser.w2", Box::new(g.denoiser.w2.iter())),
        ("denoiser.b2", Box::new(std::iter::once(&g.denoiser.b2))),
    ];
    for (name, mut values) in blocks {
        if values.any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }
    Ok(())
}
