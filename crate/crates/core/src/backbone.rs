//! Graph recommender backbones.
//!
//! A [`Backbone`] decides which graph it propagates over and how it maps
//! initial embeddings to readout representations. Implementations are
//! registered by name in a [`BackboneRegistry`] and selected at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::WeightedAdjacency;

pub const MAX_LAYERS: usize = 4;

/// Trainable initial embeddings `E⁰` (users first, then items) and the number
/// of propagation layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub embeddings: Array2<f64>,
    pub user_count: usize,
    pub layers: usize,
}

impl EmbeddingTable {
    pub fn new(embeddings: Array2<f64>, user_count: usize, layers: usize) -> Result<Self> {
        if !(1..=MAX_LAYERS).contains(&layers) {
            return Err(Error::Config(format!(
                "layer count {layers} outside [1, {MAX_LAYERS}]"
            )));
        }
        if user_count > embeddings.nrows() {
            return Err(Error::Shape(format!(
                "{user_count} users but only {} embedding rows",
                embeddings.nrows()
            )));
        }
        Ok(Self {
            embeddings,
            user_count,
            layers,
        })
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn random<R: Rng + ?Sized>(
        user_count: usize,
        item_count: usize,
        dim: usize,
        layers: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::Config(format!("embedding std {std}: {e}")))?;
        let embeddings =
            Array2::from_shape_simple_fn((user_count + item_count, dim), || normal.sample(rng));
        Self::new(embeddings, user_count, layers)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn users(&self) -> ArrayView2<'_, f64> {
        self.embeddings.slice(ndarray::s![..self.user_count, ..])
    }
}

/// Per-layer embeddings and their readout.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRepresentations {
    /// `E⁰ … E^L`
    pub layers: Vec<Array2<f64>>,
    pub readout: Array2<f64>,
    pub user_count: usize,
}

impl NodeRepresentations {
    pub fn item_count(&self) -> usize {
        self.readout.nrows() - self.user_count
    }

    /// Inner product of the user's and the item's readout rows.
    pub fn score(&self, user: usize, item: usize) -> Result<f64> {
        if user >= self.user_count || item >= self.item_count() {
            return Err(Error::Data(format!(
                "score({user}, {item}) outside {} users x {} items",
                self.user_count,
                self.item_count()
            )));
        }
        Ok(self
            .readout
            .row(user)
            .dot(&self.readout.row(self.user_count + item)))
    }

    /// Scores of every item for `user`.
    pub fn score_all_items(&self, user: usize) -> Result<Array1<f64>> {
        if user >= self.user_count {
            return Err(Error::Data(format!("user {user} out of range")));
        }
        let items = self.readout.slice(ndarray::s![self.user_count.., ..]);
        Ok(items.dot(&self.readout.row(user)))
    }
}

/// Gradients produced by [`Backbone::backward`].
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub embeddings: Array2<f64>,
    /// `∂L/∂Â` per stored adjacency entry, when requested.
    pub adjacency: Option<Vec<f64>>,
}

pub trait Backbone: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Whether social edges take part in propagation. Backbones that ignore
    /// them have nothing for the denoiser to act on.
    fn uses_social(&self) -> bool;

    /// Graph for the given social weights (aligned with the dataset's social
    /// edges; `None` means all ones).
    fn adjacency(&self, dataset: &Dataset, social_weights: Option<&[f64]>) -> Result<WeightedAdjacency>;

    fn forward(&self, table: &EmbeddingTable, adj: &WeightedAdjacency) -> Result<NodeRepresentations>;

    /// Back-propagates `∂L/∂readout` to `∂L/∂E⁰` and, optionally, to the
    /// normalized adjacency entries.
    fn backward(
        &self,
        adj: &WeightedAdjacency,
        reps: &NodeRepresentations,
        grad_readout: ArrayView2<'_, f64>,
        adjacency_grad: bool,
    ) -> BackboneGrads;
}

/// Linear propagation with mean readout over layers `0..=L`.
fn mean_readout_forward(table: &EmbeddingTable, adj: &WeightedAdjacency) -> Result<NodeRepresentations> {
    if adj.node_count() != table.embeddings.nrows() {
        return Err(Error::Shape(format!(
            "adjacency has {} nodes, embedding table {} rows",
            adj.node_count(),
            table.embeddings.nrows()
        )));
    }
    let mut layers = Vec::with_capacity(table.layers + 1);
    layers.push(table.embeddings.clone());
    for l in 0..table.layers {
        let next = adj.propagate(layers[l].view())?;
        layers.push(next);
    }
    let mut readout = layers[0].clone();
    for layer in &layers[1..] {
        readout += layer;
    }
    readout /= (table.layers + 1) as f64;
    Ok(NodeRepresentations {
        layers,
        readout,
        user_count: table.user_count,
    })
}

fn mean_readout_backward(
    adj: &WeightedAdjacency,
    reps: &NodeRepresentations,
    grad_readout: ArrayView2<'_, f64>,
    adjacency_grad: bool,
) -> BackboneGrads {
    let depth = reps.layers.len() - 1;
    let share = grad_readout.mapv(|g| g / (depth + 1) as f64);
    let mut entry = adjacency_grad.then(|| vec![0.0; adj.nnz()]);
    // grad w.r.t. E^{depth}
    let mut grad = share.clone();
    for l in (0..depth).rev() {
        if let Some(entry) = entry.as_mut() {
            adj.accumulate_entry_grad(grad.view(), reps.layers[l].view(), entry);
        }
        // Â is symmetric, so Âᵀ·G = Â·G
        let mut prev = adj.propagate(grad.view()).expect("shapes checked in forward");
        prev += &share;
        grad = prev;
    }
    BackboneGrads {
        embeddings: grad,
        adjacency: entry,
    }
}

/// LightGCN over the joint user–item–social graph.
#[derive(Debug, Default, Clone, Copy)]
pub struct LightGcnSocial;

impl Backbone for LightGcnSocial {
    fn name(&self) -> &'static str {
        "lightgcn-s"
    }

    fn uses_social(&self) -> bool {
        true
    }

    fn adjacency(&self, dataset: &Dataset, social_weights: Option<&[f64]>) -> Result<WeightedAdjacency> {
        match social_weights {
            Some(w) => WeightedAdjacency::with_social_weights(dataset, w),
            None => crate::graph::build_adjacency(dataset, None),
        }
    }

    fn forward(&self, table: &EmbeddingTable, adj: &WeightedAdjacency) -> Result<NodeRepresentations> {
        mean_readout_forward(table, adj)
    }

    fn backward(
        &self,
        adj: &WeightedAdjacency,
        reps: &NodeRepresentations,
        grad_readout: ArrayView2<'_, f64>,
        adjacency_grad: bool,
    ) -> BackboneGrads {
        mean_readout_backward(adj, reps, grad_readout, adjacency_grad)
    }
}

/// LightGCN over the user–item graph only; the social graph is ignored.
#[derive(Debug, Default, Clone, Copy)]
pub struct LightGcn;

impl Backbone for LightGcn {
    fn name(&self) -> &'static str {
        "lightgcn"
    }

    fn uses_social(&self) -> bool {
        false
    }

    fn adjacency(&self, dataset: &Dataset, _social_weights: Option<&[f64]>) -> Result<WeightedAdjacency> {
        Ok(WeightedAdjacency::interactions_only(dataset))
    }

    fn forward(&self, table: &EmbeddingTable, adj: &WeightedAdjacency) -> Result<NodeRepresentations> {
        mean_readout_forward(table, adj)
    }

    fn backward(
        &self,
        adj: &WeightedAdjacency,
        reps: &NodeRepresentations,
        grad_readout: ArrayView2<'_, f64>,
        adjacency_grad: bool,
    ) -> BackboneGrads {
        mean_readout_backward(adj, reps, grad_readout, adjacency_grad)
    }
}

/// Name → backbone lookup.
#[derive(Debug, Clone)]
pub struct BackboneRegistry {
    entries: BTreeMap<&'static str, Arc<dyn Backbone>>,
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        Self::empty()
            .with(Arc::new(LightGcnSocial))
            .with(Arc::new(LightGcn))
    }
}

impl BackboneRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn with(mut self, backbone: Arc<dyn Backbone>) -> Self {
        self.register(backbone);
        self
    }

    /// Adds or replaces the backbone under its own name.
    pub fn register(&mut self, backbone: Arc<dyn Backbone>) {
        self.entries.insert(backbone.name(), backbone);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Backbone>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown backbone {name:?} (available: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_count_bounds() {
        let e = Array2::zeros((3, 2));
        assert!(EmbeddingTable::new(e.clone(), 2, 0).is_err());
        assert!(EmbeddingTable::new(e.clone(), 2, 5).is_err());
        assert!(EmbeddingTable::new(e, 2, 4).is_ok());
    }

    #[test]
    fn edgeless_graph_readout_is_scaled_input() {
        let ds = Dataset::new(2, 1, vec![], vec![(0, 0)], vec![]).unwrap();
        let e = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let table = EmbeddingTable::new(e.clone(), 2, 3).unwrap();
        let bb = LightGcnSocial;
        let adj = bb.adjacency(&ds, None).unwrap();
        let reps = bb.forward(&table, &adj).unwrap();
        assert_eq!(reps.readout, e / 4.0);
    }

    #[test]
    fn one_layer_readout_is_half_sum() {
        let ds = Dataset::new(2, 2, vec![(0, 0), (1, 1), (0, 1)], vec![], vec![(0, 1)]).unwrap();
        let e = array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.6], [-0.7, 0.8]];
        let table = EmbeddingTable::new(e.clone(), 2, 1).unwrap();
        let adj = LightGcnSocial.adjacency(&ds, None).unwrap();
        let reps = LightGcnSocial.forward(&table, &adj).unwrap();
        let expected = (&e + &adj.propagate(e.view()).unwrap()) / 2.0;
        assert_eq!(reps.readout, expected);
    }

    #[test]
    fn scoring() {
        let reps = NodeRepresentations {
            layers: vec![],
            readout: array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]],
            user_count: 1,
        };
        assert_eq!(reps.score(0, 0).unwrap(), 0.0);
        assert_eq!(reps.score(0, 1).unwrap(), 1.0);
        assert!(reps.score(1, 0).is_err());
        assert!(reps.score(0, 2).is_err());
        assert_eq!(reps.score_all_items(0).unwrap().to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn zero_user_row_scores_zero() {
        let reps = NodeRepresentations {
            layers: vec![],
            readout: array![[0.0, 0.0], [0.3, 1.0], [1.0, -2.0]],
            user_count: 1,
        };
        assert!(reps.score_all_items(0).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn registry_lookup() {
        let reg = BackboneRegistry::default();
        assert_eq!(reg.names(), vec!["lightgcn", "lightgcn-s"]);
        assert!(reg.get("lightgcn-s").unwrap().uses_social());
        assert!(!reg.get("lightgcn").unwrap().uses_social());
        assert!(matches!(reg.get("diffnet"), Err(Error::Config(_))));
    }

    #[test]
    fn social_free_backbone_ignores_social_edges() {
        let ds = Dataset::new(2, 1, vec![(0, 0)], vec![], vec![(0, 1)]).unwrap();
        let adj = LightGcn.adjacency(&ds, None).unwrap();
        assert_eq!(adj.degree(), &[1.0, 0.0, 1.0]);
    }
}
