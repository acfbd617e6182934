//! Dense `f64` numeric kernel: tensors, a post-norm transformer encoder with
//! hand-written backward pass, Adam, checkpoints and a finite-difference
//! gradient checker.

pub mod adam;
pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod ops;
pub mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{optimizer_step, AdamState};
pub use checkpoint::{decode_params, encode_params, load_checkpoint, save_checkpoint};
pub use encoder::{encoder_backward, forward_encoder, forward_encoder_cached, init_encoder, EncoderCache};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{bce_loss, sigmoid};
pub use tensor::{ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} out of vocabulary of size {vocab_size}")]
    TokenOutOfVocab { id: usize, vocab_size: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn default_ffn_dim() -> usize {
    0
}

/// Encoder hyper-parameters. `ffn_dim = 0` means `2 * d_model`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default = "default_ffn_dim")]
    pub ffn_dim: usize,
    /// Number of learned marker embeddings added to the input (0 = none).
    #[serde(default)]
    pub n_markers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            seed: 0,
            ffn_dim: 0,
            n_markers: 0,
        }
    }
}

impl ModelConfig {
    /// Small setting used for gradient checks.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 8,
            seed: 0,
            ffn_dim: 0,
            n_markers: 0,
        }
    }

    pub fn ffn(&self) -> usize {
        if self.ffn_dim == 0 {
            2 * self.d_model
        } else {
            self.ffn_dim
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `n_layers` may be 0 (embeddings only); everything else must be positive.
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return bad("d_model, n_heads and max_seq_len must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        Ok(())
    }
}
