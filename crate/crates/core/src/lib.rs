//! Graph-denoised social recommendation.
//!
//! A LightGCN-style recommender over a joint user–item–social graph whose
//! social edges are re-weighted by a learned, preference-guided denoiser.
//! Training maximizes a pairwise ranking objective on the denoised graph while
//! an HSIC penalty limits the dependence between denoised-graph and
//! original-graph user representations.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::needless_range_loop)]

pub mod adam;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hsic;
pub mod io;
pub mod objective;
pub mod trainer;

pub use backbone::{Backbone, BackboneRegistry, EmbeddingTable, NodeRepresentations};
pub use data::{Dataset, SyntheticSpec, TrainingTriple};
pub use denoiser::{DenoiserParams, EdgeConfidenceMap, Mode};
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use graph::WeightedAdjacency;
pub use objective::LossBreakdown;
pub use trainer::{TrainConfig, TrainState};
