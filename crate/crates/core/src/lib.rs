//! Batch near-duplicate image detection over binary embeddings.
//!
//! The pipeline has three stages:
//!
//! 1. **Candidate generation** ([`lsh`], [`index`], [`search`]): selected embedding
//!    bits are grouped into LSH terms, indexed in a compressed inverted index, and
//!    every query is matched against the index in one batch by term overlap.
//! 2. **Candidate selection** ([`classifier`], [`candidates`]): a small
//!    feed-forward network scores the XOR of two embeddings; candidates are
//!    expanded with each cluster's augmentation members before thresholding.
//! 3. **Clustering** ([`clustering`], [`incremental`]): verified edges are grouped
//!    by label-propagation transitive closure and split by a greedy k-cut, and
//!    daily batches are merged into a persistent cluster store.
//!
//! [`corpus`], [`labels`], [`metrics`], and [`eval`] generate synthetic data with
//! ground truth and measure each stage.

pub mod candidates;
pub mod classifier;
pub mod clustering;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod incremental;
pub mod index;
pub mod labels;
pub mod lsh;
pub mod metrics;
pub mod neighbors;
pub mod pipeline;
pub mod scalar;
pub mod scorer;
pub mod search;
pub mod varbyte;

pub use embedding::{BinaryEmbedding, BitVector, Embeddings, ImageId};
pub use error::{Error, Result};
pub use lsh::{LshConfig, LshTermSet};
pub use scalar::Scalar;

/// Production classifier precision; the model file stores `f32` parameters.
pub type Real = f32;
pub type Mlp = classifier::MlpModel<Real>;
/// Double-precision network, used for gradient checking.
pub type Mlp64 = classifier::MlpModel<f64>;
