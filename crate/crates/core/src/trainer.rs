//! Training loop: per-batch denoising, the two forward passes, the combined
//! objective, Adam updates, periodic evaluation and early stopping.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::adam::{self, Moments};
use crate::backbone::{Backbone, BackboneRegistry, EmbeddingTable, NodeRepresentations};
use crate::data::{self, Dataset};
use crate::denoiser::{self, DenoiserParams, EdgeConfidenceMap, Mode};
use crate::error::{Error, Result};
use crate::eval::{self, RunMetrics};
use crate::objective::{LossBreakdown, ModelParams, Objective, ObjectiveConfig};

/// Cutoff used for model selection.
pub const SELECTION_CUTOFF: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub backbone: String,
    pub dim: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub beta: f64,
    pub sigma2: f64,
    pub temperature: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub init_std: f64,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub normalize_kernel: bool,
    pub detach_original: bool,
    /// When positive, this fraction of each user's train interactions is held
    /// out for model selection instead of using the test set.
    pub validation_fraction: f64,
    pub cutoffs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: "lightgcn-s".into(),
            dim: 64,
            layers: 3,
            learning_rate: 0.001,
            batch_size: 2048,
            lambda: 1e-4,
            beta: 40.0,
            sigma2: 2.5,
            temperature: 0.2,
            epsilon: 0.5,
            epochs: 1000,
            eval_every: 1,
            patience: 50,
            seed: 0,
            init_std: 0.01,
            split_ratio: 0.8,
            split_seed: 0,
            normalize_kernel: true,
            detach_original: false,
            validation_fraction: 0.0,
            cutoffs: eval::DEFAULT_CUTOFFS.to_vec(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 21] = [
        "backbone",
        "dim",
        "layers",
        "lr",
        "batch_size",
        "lambda",
        "beta",
        "sigma2",
        "temperature",
        "epsilon",
        "epochs",
        "eval_every",
        "patience",
        "seed",
        "init_std",
        "split_ratio",
        "split_seed",
        "normalize_kernel",
        "detach_original",
        "validation_fraction",
        "cutoffs",
    ];

    /// Sets one field from its `key=value` spelling. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "backbone" => self.backbone = value.trim().to_string(),
            "dim" => self.dim = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "lr" | "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "sigma2" => self.sigma2 = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "split_ratio" => self.split_ratio = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "normalize_kernel" => self.normalize_kernel = parse_bool(key, value)?,
            "detach_original" => self.detach_original = parse_bool(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "cutoffs" => {
                self.cutoffs = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `key=value` lines, in [`TrainConfig::KEYS`] order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let cutoffs: Vec<String> = self.cutoffs.iter().map(usize::to_string).collect();
        vec![
            ("backbone", self.backbone.clone()),
            ("dim", self.dim.to_string()),
            ("layers", self.layers.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lambda", self.lambda.to_string()),
            ("beta", self.beta.to_string()),
            ("sigma2", self.sigma2.to_string()),
            ("temperature", self.temperature.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("epochs", self.epochs.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("init_std", self.init_std.to_string()),
            ("split_ratio", self.split_ratio.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("normalize_kernel", self.normalize_kernel.to_string()),
            ("detach_original", self.detach_original.to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
            ("cutoffs", cutoffs.join(",")),
        ]
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(1..=crate::backbone::MAX_LAYERS).contains(&self.layers) {
            return bad(format!("layers {} outside [1, 4]", self.layers));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("batch_size, eval_every and patience must be positive".into());
        }
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return bad("lambda and beta must be non-negative".into());
        }
        if !(self.sigma2 > 0.0) || !(self.temperature > 0.0) || !(self.init_std > 0.0) {
            return bad("sigma2, temperature and init_std must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.split_ratio) {
            return bad("epsilon and split_ratio must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)".into());
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return bad("cutoffs must be a non-empty list of positive integers".into());
        }
        BackboneRegistry::default().get(&self.backbone)?;
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            beta: self.beta,
            lambda: self.lambda,
            sigma2: self.sigma2,
            normalize_kernel: self.normalize_kernel,
            detach_original: self.detach_original,
        }
    }

    /// Cutoffs with the selection cutoff always present.
    fn eval_cutoffs(&self) -> Vec<usize> {
        let mut c = self.cutoffs.clone();
        if !c.contains(&SELECTION_CUTOFF) {
            c.push(SELECTION_CUTOFF);
        }
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    /// Moments for `E⁰`, `W1`, `b1`, `W2`, `b2`, in that order.
    pub moments: [Moments; 5],
    pub adam_step: u64,
    pub epoch: u64,
    pub best_metric: Option<f64>,
    pub best_epoch: u64,
}

impl TrainState {
    pub fn table(&self) -> &EmbeddingTable {
        &self.params.table
    }

    pub fn denoiser(&self) -> &DenoiserParams {
        &self.params.denoiser
    }
}

/// Gaussian `N(0, init_std²)` embeddings and denoiser weights, zero moments.
pub fn init(config: &TrainConfig, dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<TrainState> {
    config.validate()?;
    let table = EmbeddingTable::random(
        dataset.user_count(),
        dataset.item_count(),
        config.dim,
        config.layers,
        config.init_std,
        rng,
    )?;
    let denoiser = DenoiserParams::random(
        config.dim,
        config.init_std,
        config.temperature,
        config.epsilon,
        rng,
    );
    let d = config.dim;
    Ok(TrainState {
        moments: [
            Moments::zeros(table.embeddings.len()),
            Moments::zeros(d * 3 * d),
            Moments::zeros(d),
            Moments::zeros(d),
            Moments::zeros(1),
        ],
        params: ModelParams { table, denoiser },
        adam_step: 0,
        epoch: 0,
        best_metric: None,
        best_epoch: 0,
    })
}

/// One pass of `⌈|train| / batch_size⌉` sampled batches. Returns the mean
/// loss components.
pub fn train_epoch(
    state: &mut TrainState,
    objective: &Objective<'_>,
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let batches = dataset.train().len().div_ceil(config.batch_size);
    let mut acc = LossBreakdown {
        beta: config.beta,
        lambda: config.lambda,
        ..Default::default()
    };
    for _ in 0..batches {
        let batch = data::sample_batch(dataset, config.batch_size, rng)?;
        let deltas = if objective.denoises() {
            denoiser::draw_deltas(dataset.social_edges().len(), rng)
        } else {
            Vec::new()
        };
        let (loss, grads, _) = objective.loss_and_gradients(&state.params, &batch, &deltas)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {} step {}: {loss:?}",
                state.epoch + 1,
                state.adam_step + 1
            )));
        }
        state.adam_step += 1;
        let lr = config.learning_rate;
        let step = state.adam_step;
        let p = &mut state.params;
        let [m_e, m_w1, m_b1, m_w2, m_b2] = &mut state.moments;
        adam::update(
            p.table.embeddings.as_slice_mut().expect("contiguous"),
            grads.embeddings.as_slice().expect("contiguous"),
            m_e,
            lr,
            step,
        );
        if objective.denoises() {
            let d = &mut p.denoiser;
            adam::update(d.w1.as_slice_mut().expect("contiguous"), grads.denoiser.w1.as_slice().expect("contiguous"), m_w1, lr, step);
            adam::update(d.b1.as_slice_mut().expect("contiguous"), grads.denoiser.b1.as_slice().expect("contiguous"), m_b1, lr, step);
            adam::update(d.w2.as_slice_mut().expect("contiguous"), grads.denoiser.w2.as_slice().expect("contiguous"), m_w2, lr, step);
            adam::update(std::slice::from_mut(&mut d.b2), &[grads.denoiser.b2], m_b2, lr, step);
        }
        acc.bpr_loss += loss.bpr_loss;
        acc.reg_loss += loss.reg_loss;
        acc.rec_loss += loss.rec_loss;
        acc.ib_loss += loss.ib_loss;
        acc.total += loss.total;
    }
    let n = batches.max(1) as f64;
    acc.bpr_loss /= n;
    acc.reg_loss /= n;
    acc.rec_loss /= n;
    acc.ib_loss /= n;
    acc.total /= n;
    state.epoch += 1;
    Ok(acc)
}

/// Edge confidences with deterministic weights (`δ = 0.5`).
pub fn confidence_map(state: &TrainState, dataset: &Dataset) -> Result<EdgeConfidenceMap> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    denoiser::denoise(
        state.denoiser(),
        state.table().users(),
        dataset,
        Mode::Deterministic,
        &mut unused,
    )
}

/// Evaluation-time representations: the denoised graph with deterministic
/// weights, or the backbone's own graph when it ignores social edges.
pub fn representations(
    state: &TrainState,
    dataset: &Dataset,
    backbone: &dyn Backbone,
) -> Result<NodeRepresentations> {
    let adj = if backbone.uses_social() && !dataset.social_edges().is_empty() {
        let map = confidence_map(state, dataset)?;
        backbone.adjacency(dataset, Some(map.relaxed()))?
    } else {
        backbone.adjacency(dataset, None)?
    };
    backbone.forward(state.table(), &adj)
}

pub fn evaluate_state(state: &TrainState, dataset: &Dataset, config: &TrainConfig) -> Result<RunMetrics> {
    let backbone = BackboneRegistry::default().get(&config.backbone)?;
    let reps = representations(state, dataset, backbone.as_ref())?;
    let mut m = eval::evaluate(&reps, dataset, &config.eval_cutoffs())?;
    m.metrics.retain(|c, _| config.cutoffs.contains(c));
    m.seed = Some(config.seed);
    Ok(m)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss: LossBreakdown,
    pub metrics: Option<RunMetrics>,
}

impl EpochRecord {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("epoch".into(), json!(self.epoch));
        m.insert("bpr_loss".into(), json!(self.loss.bpr_loss));
        m.insert("rec_loss".into(), json!(self.loss.rec_loss));
        m.insert("ib_loss".into(), json!(self.loss.ib_loss));
        m.insert("reg_loss".into(), json!(self.loss.reg_loss));
        m.insert("total_loss".into(), json!(self.loss.total));
        let metrics = match &self.metrics {
            Some(r) => {
                let mut o = Map::new();
                for (c, v) in &r.metrics {
                    o.insert(c.to_string(), json!({"recall": v.recall, "ndcg": v.ndcg}));
                }
                Value::Object(o)
            }
            None => Value::Null,
        };
        m.insert("metrics".into(), metrics);
        Value::Object(m)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// State with the best selection metric seen.
    pub best: TrainState,
    /// State when training stopped.
    pub last: TrainState,
    pub log: Vec<EpochRecord>,
    pub config: TrainConfig,
}

impl FitOutcome {
    /// JSON-lines log: a header echoing the effective config, then one record
    /// per epoch.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        let mut cfg = Map::new();
        for (k, v) in self.config.pairs() {
            cfg.insert(k.into(), Value::String(v));
        }
        let _ = writeln!(out, "{}", json!({ "config": cfg }));
        for r in &self.log {
            let _ = writeln!(out, "{}", r.to_json());
        }
        out
    }
}

/// Trains for up to `config.epochs`, evaluating every `eval_every` epochs and
/// keeping the state with the best Recall@20. Stops after `patience`
/// evaluations without improvement.
pub fn fit(config: &TrainConfig, dataset: &Dataset) -> Result<FitOutcome> {
    config.validate()?;
    let (train_data, selection_data) = if config.validation_fraction > 0.0 {
        let held = dataset.holdout(config.validation_fraction, config.split_seed ^ 0x5eed)?;
        (held.clone(), held)
    } else {
        (dataset.clone(), dataset.clone())
    };
    let backbone = BackboneRegistry::default().get(&config.backbone)?;
    let objective = Objective::new(backbone.as_ref(), &train_data, config.objective())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = init(config, &train_data, &mut rng)?;
    let mut best: Option<TrainState> = None;
    let mut since_best = 0usize;
    let mut log = Vec::new();

    for epoch in 1..=config.epochs {
        let loss = train_epoch(&mut state, &objective, &train_data, config, &mut rng)?;
        let evaluate_now = epoch % config.eval_every == 0 || (epoch == config.epochs && best.is_none());
        let metrics = if evaluate_now {
            let mut m = {
                let reps = representations(&state, &selection_data, backbone.as_ref())?;
                eval::evaluate(&reps, &selection_data, &config.eval_cutoffs())?
            };
            let score = m.recall(SELECTION_CUTOFF).expect("selection cutoff evaluated");
            m.metrics.retain(|c, _| config.cutoffs.contains(c));
            m.seed = Some(config.seed);
            if state.best_metric.is_none_or(|b| score > b) {
                state.best_metric = Some(score);
                state.best_epoch = state.epoch;
                best = Some(state.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
            Some(m)
        } else {
            None
        };
        log.push(EpochRecord {
            epoch: state.epoch,
            loss,
            metrics,
        });
        if since_best >= config.patience {
            break;
        }
    }

    let best = match best {
        Some(b) => b,
        None => state.clone(),
    };
    Ok(FitOutcome {
        best,
        last: state,
        log,
        config: config.clone(),
    })
}
