//! The decoder-only transformer over the joint discrete vocabulary.
//!
//! Parameter count (see `ModelConfig::param_count`):
//! `V*d + S*d + L*(4*(d^2+d) + 2*d*d_ff + d_ff + d + 4*d) + 2*d`
//! with tied input/output embeddings (the LM head reuses `embed`).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod assemble;
pub mod checkpoint;
mod decode;
mod math;
mod params;
mod transformer;

pub use assemble::{assemble, pad_batch, AssembledSequence, Segment};
pub use decode::KvCache;
pub use params::{Gradients, Parameters, Tensor};
pub use transformer::RunMode;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {0} is outside the vocabulary")]
    OutOfVocab(u32),
    #[error("sequence for example {example_id} has {len} tokens, max_seq_len is {max}")]
    SequenceTooLong { example_id: String, len: usize, max: usize },
    #[error("example {example_id} has no masked target positions")]
    NoMaskedPositions { example_id: String },
    #[error("example {example_id} has no input streams")]
    NoInputStreams { example_id: String },
    #[error("example {example_id} assembled for ASR without an audio stream")]
    MissingAudio { example_id: String },
    #[error("checkpoint io at {path}: {message}")]
    CheckpointIo { path: PathBuf, message: String },
    #[error("bad checkpoint {path}: {message}")]
    BadCheckpoint { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Dropout on the attention and MLP residual branches during training.
    #[serde(default)]
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// The desk-scale default: 4 layers, 4 heads, width 128.
    pub fn toy(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_seq_len: 768,
            vocab_size,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    /// Closed-form learnable parameter total; tested against allocation.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let per_layer = 4 * (d * d + d) + (f * d + f) + (d * f + d) + 4 * d;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Model {
        config.validate().expect("invalid model config");
        let params = Parameters::init(&config, seed);
        Model { config, params }
    }
}
