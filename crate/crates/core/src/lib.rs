//! Cooperative embeddings for instance, attribute and category retrieval.
//!
//! One Euclidean superspace of dimension `N` is split into `K` contiguous,
//! axis-aligned attribute subspaces of width `n = N / K`. Images (given as
//! precomputed feature vectors) are mapped into the superspace by an affine
//! projector and pulled towards three kinds of latent proxies:
//!
//! * instance proxies, living in the full superspace;
//! * attribute-value proxies, one set per attribute subspace;
//! * category proxies, defined as the mean of their instances' proxies.
//!
//! The crate covers the whole pipeline: dataset ingestion ([`data`]), the
//! subspace algebra ([`embedding`]), losses with analytic gradients
//! ([`loss`]), Adam training ([`train`]), retrieval metrics ([`eval`]),
//! kNN-graph navigation ([`nav`]) and a synthetic data generator
//! ([`synth`]).

pub mod checkpoint;
pub mod data;
pub mod embedding;
mod error;
pub mod eval;
pub mod loss;
pub mod nav;
pub mod report;
pub mod synth;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMetadata};
pub use data::{
    corrupt_attributes, load_dataset, save_dataset, AttributeSpec, CorruptionMode, Dataset, Item,
    LabelSpace, Split,
};
pub use embedding::{mask_subspace, normalize_per_subspace, EmbeddingConfig, Projector};
pub use error::{Error, ErrorKind, Result};
pub use eval::{evaluate, MetricsReport, RetrievalIndex};
pub use loss::{LossWeights, OrderingConfig, ProxyStore};
pub use nav::{NeighbourGraph, TransitionPath};
pub use synth::{generate, SynthConfig};
pub use train::{train, TrainConfig, TrainOutcome};

/// Squared Euclidean distance between two equal-length slices.
#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
