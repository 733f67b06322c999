//! Full-ranking top-N evaluation: every item outside the user's train set is
//! a candidate.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::backbone::NodeRepresentations;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 20];

/// Orders by descending score, then ascending item id.
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top-`n` items by score among items not in `exclude` (sorted).
pub fn top_n(scores: &[f64], exclude: &[usize], n: usize) -> Vec<usize> {
    let mut candidates: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| exclude.binary_search(i).is_err())
        .map(|(i, &s)| (i, s))
        .collect();
    if n == 0 {
        return Vec::new();
    }
    if candidates.len() > n {
        candidates.select_nth_unstable_by(n - 1, rank_order);
        candidates.truncate(n);
    }
    candidates.sort_unstable_by(rank_order);
    candidates.into_iter().map(|(i, _)| i).collect()
}

/// The `cutoff` highest-scoring non-train items for `user`, ties broken by
/// ascending item id.
pub fn rank_user(reps: &NodeRepresentations, dataset: &Dataset, user: usize, cutoff: usize) -> Result<Vec<usize>> {
    let scores = reps.score_all_items(user)?;
    Ok(top_n(
        scores.as_slice().expect("contiguous"),
        dataset.train_items(user),
        cutoff,
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub recall: f64,
    pub ndcg: f64,
}

/// Recall and NDCG for a single ranked list against a set of relevant items.
pub fn user_metrics(ranked: &[usize], relevant: &[usize], cutoff: usize) -> CutoffMetrics {
    if relevant.is_empty() {
        return CutoffMetrics::default();
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (p, item) in ranked.iter().take(cutoff).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += 1.0 / ((p + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..cutoff.min(relevant.len()))
        .map(|p| 1.0 / ((p + 2) as f64).log2())
        .sum();
    CutoffMetrics {
        recall: hits as f64 / relevant.len() as f64,
        ndcg: dcg / ideal,
    }
}

/// Metrics for one run: cutoff → averages over evaluated users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: Option<u64>,
    pub metrics: BTreeMap<usize, CutoffMetrics>,
    pub users_evaluated: usize,
}

impl RunMetrics {
    pub fn recall(&self, cutoff: usize) -> Option<f64> {
        self.metrics.get(&cutoff).map(|m| m.recall)
    }

    pub fn ndcg(&self, cutoff: usize) -> Option<f64> {
        self.metrics.get(&cutoff).map(|m| m.ndcg)
    }
}

/// Per-run metrics and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
    pub mean: BTreeMap<usize, CutoffMetrics>,
    pub users_evaluated: usize,
}

impl MetricsReport {
    pub fn from_runs(runs: Vec<RunMetrics>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::Config("metrics report needs at least one run".into()))?;
        let users_evaluated = first.users_evaluated;
        let n = runs.len() as f64;
        let mut mean = BTreeMap::new();
        for &cutoff in first.metrics.keys() {
            let mut acc = CutoffMetrics::default();
            for r in &runs {
                let m = r.metrics.get(&cutoff).copied().unwrap_or_default();
                acc.recall += m.recall;
                acc.ndcg += m.ndcg;
            }
            acc.recall /= n;
            acc.ndcg /= n;
            mean.insert(cutoff, acc);
        }
        Ok(Self {
            runs,
            mean,
            users_evaluated,
        })
    }

    pub fn recall(&self, cutoff: usize) -> Option<f64> {
        self.mean.get(&cutoff).map(|m| m.recall)
    }

    pub fn ndcg(&self, cutoff: usize) -> Option<f64> {
        self.mean.get(&cutoff).map(|m| m.ndcg)
    }

    /// `{"<cutoff>": {recall, ndcg}, ..., "per_seed": [...], "users_evaluated": n}`
    pub fn to_json(&self) -> Value {
        let mut out = Map::new();
        for (cutoff, m) in &self.mean {
            out.insert(cutoff.to_string(), json!({"recall": m.recall, "ndcg": m.ndcg}));
        }
        let per_seed: Vec<Value> = self
            .runs
            .iter()
            .map(|r| {
                let mut row = Map::new();
                row.insert("seed".into(), json!(r.seed));
                for (cutoff, m) in &r.metrics {
                    row.insert(cutoff.to_string(), json!({"recall": m.recall, "ndcg": m.ndcg}));
                }
                Value::Object(row)
            })
            .collect();
        out.insert("per_seed".into(), Value::Array(per_seed));
        out.insert("users_evaluated".into(), json!(self.users_evaluated));
        Value::Object(out)
    }
}

/// Probability that a random genuine edge scores above a random noise edge,
/// ties counting one half. `None` unless both classes are present.
pub fn separation_auc(scores: &[f64], noisy: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), noisy.len(), "score/label length");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        rank_sum += avg * order[start..end].iter().filter(|&&k| !noisy[k]).count() as f64;
        start = end;
    }
    let genuine = noisy.iter().filter(|&&n| !n).count() as f64;
    let noise = noisy.len() as f64 - genuine;
    if genuine == 0.0 || noise == 0.0 {
        return None;
    }
    Some((rank_sum - genuine * (genuine + 1.0) / 2.0) / (genuine * noise))
}

/// Evaluates every user with at least one test item.
pub fn evaluate(reps: &NodeRepresentations, dataset: &Dataset, cutoffs: &[usize]) -> Result<RunMetrics> {
    if dataset.test().is_empty() {
        return Err(Error::Data("cannot evaluate: test set is empty".into()));
    }
    if cutoffs.is_empty() {
        return Err(Error::Config("no evaluation cutoffs".into()));
    }
    let max_cutoff = *cutoffs.iter().max().expect("non-empty");
    let users: Vec<usize> = (0..dataset.user_count())
        .filter(|&u| !dataset.test_items(u).is_empty())
        .collect();
    let per_user: Vec<Vec<CutoffMetrics>> = users
        .par_iter()
        .map(|&u| {
            let ranked = rank_user(reps, dataset, u, max_cutoff)?;
            Ok(cutoffs
                .iter()
                .map(|&c| user_metrics(&ranked, dataset.test_items(u), c))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut metrics = BTreeMap::new();
    for (k, &cutoff) in cutoffs.iter().enumerate() {
        let mut acc = CutoffMetrics::default();
        for m in &per_user {
            acc.recall += m[k].recall;
            acc.ndcg += m[k].ndcg;
        }
        acc.recall /= users.len() as f64;
        acc.ndcg /= users.len() as f64;
        metrics.insert(cutoff, acc);
    }
    Ok(RunMetrics {
        seed: None,
        metrics,
        users_evaluated: users.len(),
    })
}
