//! Joint user–item–social adjacency in CSR form with symmetric degree
//! normalization.
//!
//! Node `u < M` is a user, node `M + i` is item `i`. The user–user block holds
//! (possibly re-weighted) social edges, the user–item blocks hold train
//! interactions with weight 1, and the item–item block is empty. Degrees are
//! recomputed from the weighted matrix on every build.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::denoiser::EdgeConfidenceMap;
use crate::error::{Error, Result};

/// Lower bound applied to degrees before `d^{-1/2}`.
pub const DEGREE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAdjacency {
    node_count: usize,
    user_count: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    normalized: Vec<f64>,
    degree: Vec<f64>,
    /// CSR positions of `(a, b)` and `(b, a)` for each social edge.
    social_pos: Vec<(usize, usize)>,
}

/// Builds the joint adjacency. Without `social_weights`, every social edge has
/// weight 1; otherwise the map's relaxed weights are used.
pub fn build_adjacency(
    dataset: &Dataset,
    social_weights: Option<&EdgeConfidenceMap>,
) -> Result<WeightedAdjacency> {
    match social_weights {
        None => WeightedAdjacency::build(dataset, None, true),
        Some(map) => {
            if map.edges() != dataset.social_edges() {
                let unknown = map
                    .edges()
                    .iter()
                    .find(|&&(a, b)| dataset.social_index(a, b).is_none());
                return Err(match unknown {
                    Some(e) => Error::Data(format!("unknown social edge {e:?}")),
                    None => Error::Data("weights do not cover every social edge".into()),
                });
            }
            WeightedAdjacency::build(dataset, Some(map.relaxed()), true)
        }
    }
}

impl WeightedAdjacency {
    /// Adjacency with social weights aligned to [`Dataset::social_edges`].
    pub fn with_social_weights(dataset: &Dataset, weights: &[f64]) -> Result<Self> {
        Self::build(dataset, Some(weights), true)
    }

    /// Adjacency over train interactions only.
    pub fn interactions_only(dataset: &Dataset) -> Self {
        Self::build(dataset, None, false).expect("unweighted build cannot fail")
    }

    fn build(dataset: &Dataset, social: Option<&[f64]>, include_social: bool) -> Result<Self> {
        let m = dataset.user_count();
        let n = dataset.node_count();
        let edges = dataset.social_edges();
        if let Some(w) = social {
            if w.len() != edges.len() {
                return Err(Error::Shape(format!(
                    "{} social weights for {} social edges",
                    w.len(),
                    edges.len()
                )));
            }
            if let Some((k, x)) = w.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Data(format!(
                    "social weight {x} on edge {:?} outside [0, 1]",
                    edges[k]
                )));
            }
        }

        // (col, weight, social edge index)
        let mut rows: Vec<Vec<(usize, f64, Option<usize>)>> = vec![Vec::new(); n];
        if include_social {
            for (k, &(a, b)) in edges.iter().enumerate() {
                let w = social.map_or(1.0, |w| w[k]);
                rows[a].push((b, w, Some(k)));
                rows[b].push((a, w, Some(k)));
            }
        }
        for &(u, i) in dataset.train() {
            rows[u].push((m + i, 1.0, None));
            rows[m + i].push((u, 1.0, None));
        }

        let nnz = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut weights = Vec::with_capacity(nnz);
        let mut social_pos = vec![(usize::MAX, usize::MAX); if include_social { edges.len() } else { 0 }];
        row_ptr.push(0);
        for (r, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable_by_key(|e| e.0);
            for (c, w, k) in row {
                if let Some(k) = k {
                    let pos = cols.len();
                    if r < c {
                        social_pos[k].0 = pos;
                    } else {
                        social_pos[k].1 = pos;
                    }
                }
                cols.push(c);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }

        let degree: Vec<f64> = (0..n)
            .map(|r| weights[row_ptr[r]..row_ptr[r + 1]].iter().sum())
            .collect();
        let inv_sqrt: Vec<f64> = degree
            .iter()
            .map(|&d| d.max(DEGREE_FLOOR).powf(-0.5))
            .collect();
        let mut normalized = vec![0.0; nnz];
        for r in 0..n {
            for p in row_ptr[r]..row_ptr[r + 1] {
                normalized[p] = weights[p] * (inv_sqrt[r] * inv_sqrt[cols[p]]);
            }
        }

        Ok(Self {
            node_count: n,
            user_count: m,
            row_ptr,
            cols,
            weights,
            normalized,
            degree,
            social_pos,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    /// Stored entries, including zero-weight social edges.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `(row, col, weight)` for every entry with nonzero weight.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.entries(&self.weights)
    }

    /// `(row, col, normalized weight)` for every entry with nonzero weight.
    pub fn normalized_edges(&self) -> Vec<(usize, usize, f64)> {
        self.entries(&self.normalized)
    }

    fn entries(&self, values: &[f64]) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for r in 0..self.node_count {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                if values[p] != 0.0 {
                    out.push((r, self.cols[p], values[p]));
                }
            }
        }
        out
    }

    /// Dense copy of the normalized matrix. Intended for tests and debugging.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.node_count, self.node_count));
        for (r, c, w) in self.normalized_edges() {
            out[[r, c]] = w;
        }
        out
    }

    /// Writes `row,col,normalized_weight` lines.
    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("row,col,normalized_weight\n");
        for (r, c, w) in self.normalized_edges() {
            let _ = writeln!(out, "{r},{c},{w}");
        }
        crate::io::atomic_write(path, out.as_bytes())
    }

    /// `D^{-1/2} A D^{-1/2} · E`.
    pub fn propagate(&self, embeddings: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if embeddings.nrows() != self.node_count {
            return Err(Error::Shape(format!(
                "propagate: {} rows for {} nodes",
                embeddings.nrows(),
                self.node_count
            )));
        }
        let dim = embeddings.ncols();
        let mut out = Array2::zeros((self.node_count, dim));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut row)| {
                for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                    let w = self.normalized[p];
                    if w == 0.0 {
                        continue;
                    }
                    row.scaled_add(w, &embeddings.row(self.cols[p]));
                }
            });
        Ok(out)
    }

    /// Accumulates `∂L/∂Â_rc += ⟨upstream_r, input_c⟩` for every stored entry,
    /// where `upstream = ∂L/∂(Â·input)`.
    pub(crate) fn accumulate_entry_grad(
        &self,
        upstream: ArrayView2<'_, f64>,
        input: ArrayView2<'_, f64>,
        grad: &mut [f64],
    ) {
        let row_grads: Vec<Vec<f64>> = (0..self.node_count)
            .into_par_iter()
            .map(|r| {
                let g = upstream.row(r);
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|p| g.dot(&input.row(self.cols[p])))
                    .collect()
            })
            .collect();
        for (r, vals) in row_grads.into_iter().enumerate() {
            for (p, v) in (self.row_ptr[r]..self.row_ptr[r + 1]).zip(vals) {
                grad[p] += v;
            }
        }
    }

    /// Chains `∂L/∂Â` (per stored entry) through normalization and degree
    /// recomputation to `∂L/∂w` for each social edge weight.
    pub(crate) fn social_weight_grad(&self, entry_grad: &[f64]) -> Vec<f64> {
        let inv_sqrt: Vec<f64> = self
            .degree
            .iter()
            .map(|&d| d.max(DEGREE_FLOOR).powf(-0.5))
            .collect();
        // ∂L/∂d_v, where d_v enters Â only through s_v = d_v^{-1/2}.
        // Only user degrees depend on social weights.
        let degree_grad: Vec<f64> = (0..self.user_count)
            .map(|v| {
                if self.degree[v] <= DEGREE_FLOOR {
                    return 0.0;
                }
                let mut gs = 0.0;
                for p in self.row_ptr[v]..self.row_ptr[v + 1] {
                    let u = self.cols[p];
                    // Â_vu and Â_uv both carry s_v; A is symmetric.
                    let q = self.position(u, v);
                    gs += (entry_grad[p] + entry_grad[q]) * self.weights[p] * inv_sqrt[u];
                }
                gs * -0.5 * self.degree[v].powf(-1.5)
            })
            .collect();

        self.social_pos
            .iter()
            .map(|&(p_ab, p_ba)| {
                let a = self.row_of(p_ab);
                let b = self.cols[p_ab];
                let scale = inv_sqrt[a] * inv_sqrt[b];
                (entry_grad[p_ab] + entry_grad[p_ba]) * scale + degree_grad[a] + degree_grad[b]
            })
            .collect()
    }

    fn position(&self, r: usize, c: usize) -> usize {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        lo + self.cols[lo..hi]
            .binary_search(&c)
            .expect("adjacency is structurally symmetric")
    }

    fn row_of(&self, p: usize) -> usize {
        self.row_ptr.partition_point(|&x| x <= p) - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toy() -> Dataset {
        Dataset::new(2, 1, vec![(0, 0)], vec![], vec![(0, 1)]).unwrap()
    }

    #[test]
    fn three_node_normalization() {
        let adj = build_adjacency(&toy(), None).unwrap();
        assert_eq!(adj.degree(), &[2.0, 1.0, 1.0]);
        let dense = adj.to_dense();
        assert_abs_diff_eq!(dense[[0, 2]], 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(dense[[2, 0]], dense[[0, 2]], epsilon = 0.0);
        assert_abs_diff_eq!(dense[[0, 1]], 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(dense[[1, 2]], 0.0);
    }

    #[test]
    fn zero_social_weights_empty_the_user_block() {
        let ds = toy();
        let adj = WeightedAdjacency::with_social_weights(&ds, &[0.0]).unwrap();
        assert_eq!(adj.degree(), &[1.0, 0.0, 1.0]);
        assert!(adj
            .normalized_edges()
            .iter()
            .all(|&(r, c, _)| r >= 2 || c >= 2));
        // user 1 is now isolated
        assert!(adj.normalized_edges().iter().all(|&(r, c, _)| r != 1 && c != 1));
    }

    #[test]
    fn unit_weights_match_unweighted() {
        let ds = toy();
        let a = build_adjacency(&ds, None).unwrap();
        let b = WeightedAdjacency::with_social_weights(&ds, &[1.0]).unwrap();
        assert_eq!(a.normalized_edges(), b.normalized_edges());
    }

    #[test]
    fn out_of_range_weight_rejected() {
        let ds = toy();
        assert!(matches!(
            WeightedAdjacency::with_social_weights(&ds, &[1.5]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            WeightedAdjacency::with_social_weights(&ds, &[0.5, 0.5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn isolated_node_propagates_to_zero() {
        let ds = Dataset::new(3, 1, vec![(0, 0)], vec![], vec![]).unwrap();
        let adj = build_adjacency(&ds, None).unwrap();
        let e = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let out = adj.propagate(e.view()).unwrap();
        assert_eq!(out.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(out.row(2).to_vec(), vec![0.0, 0.0]);
        assert_eq!(out.row(0).to_vec(), vec![7.0, 8.0]);
    }

    #[test]
    fn propagate_rejects_wrong_rows() {
        let adj = build_adjacency(&toy(), None).unwrap();
        let e = Array2::<f64>::zeros((2, 4));
        assert!(matches!(adj.propagate(e.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn interactions_only_drops_social_block() {
        let adj = WeightedAdjacency::interactions_only(&toy());
        assert_eq!(adj.degree(), &[1.0, 0.0, 1.0]);
        assert_eq!(adj.nnz(), 2);
    }

    #[test]
    fn dump_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("adj.csv");
        build_adjacency(&toy(), None).unwrap().dump_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("row,col,normalized_weight\n"));
    }
}
