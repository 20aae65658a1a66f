//! Near-duplicate classifier over the XOR of two binary embeddings.
//!
//! The network is a stack of fully connected ReLU layers followed by a single
//! sigmoid output. Parameters are generic over [`Scalar`](crate::Scalar) so the
//! same code trains in `f32` and is gradient-checked in `f64`.

mod file;
mod mlp;
mod train;

pub use file::{load_model, read_model_from, save_model, write_model_to};
pub use mlp::{Gradients, Layer, MlpModel};
pub use train::{
    choose_threshold, predict_pairs, train, Adam, ThresholdChoice, TrainConfig, TrainReport,
};

use crate::embedding::{BinaryEmbedding, BitVector};
use crate::error::Result;

pub const DEFAULT_HIDDEN: [usize; 3] = [512, 256, 64];

/// Bitwise XOR of a pair's embeddings; the network input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XorFeature {
    pub bits: BitVector,
}

impl XorFeature {
    pub fn dim(&self) -> usize {
        self.bits.len()
    }
}

pub fn xor_features(a: &BinaryEmbedding, b: &BinaryEmbedding) -> Result<XorFeature> {
    Ok(XorFeature {
        bits: a.bits.xor(&b.bits)?,
    })
}
