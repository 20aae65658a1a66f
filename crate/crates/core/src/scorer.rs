//! Pair scoring used by candidate selection, k-cut, and head election.

use rayon::prelude::*;

use crate::embedding::{BinaryEmbedding, Embeddings, ImageId};
use crate::error::Result;

/// Near-duplicate probability for a pair of embeddings. Implementations must be
/// symmetric and deterministic.
pub trait PairScorer: Sync {
    fn score(&self, a: &BinaryEmbedding, b: &BinaryEmbedding) -> f64;

    fn score_ids(&self, embeddings: &Embeddings, a: ImageId, b: ImageId) -> Result<f64> {
        Ok(self.score(embeddings.require(a)?, embeddings.require(b)?))
    }
}

impl<S: PairScorer + ?Sized> PairScorer for &S {
    fn score(&self, a: &BinaryEmbedding, b: &BinaryEmbedding) -> f64 {
        (**self).score(a, b)
    }
}

/// Order-preserving batch scoring by id.
pub fn score_pairs<S: PairScorer + ?Sized>(
    scorer: &S,
    pairs: &[(ImageId, ImageId)],
    embeddings: &Embeddings,
) -> Result<Vec<f64>> {
    pairs
        .par_iter()
        .map(|&(a, b)| scorer.score_ids(embeddings, a, b))
        .collect()
}

/// Logistic score over hamming distance: `sigmoid(slope * (midpoint - hamming))`.
///
/// Stand-in scorer when no trained model is configured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HammingScorer {
    pub midpoint: f64,
    pub slope: f64,
}

impl HammingScorer {
    pub fn new(midpoint: f64, slope: f64) -> Self {
        HammingScorer { midpoint, slope }
    }
}

impl PairScorer for HammingScorer {
    fn score(&self, a: &BinaryEmbedding, b: &BinaryEmbedding) -> f64 {
        let h = a.hamming(b) as f64;
        1.0 / (1.0 + (-(self.slope * (self.midpoint - h))).exp())
    }
}

/// Adapts a closure into a scorer.
pub struct FnScorer<F>(pub F);

impl<F> PairScorer for FnScorer<F>
where
    F: Fn(&BinaryEmbedding, &BinaryEmbedding) -> f64 + Sync,
{
    fn score(&self, a: &BinaryEmbedding, b: &BinaryEmbedding) -> f64 {
        (self.0)(a, b)
    }
}
