//! A small masked-language-model encoder that runs every context regime
//! end-to-end: multimodal embeddings (word + 1D position + box corners),
//! a post-norm transformer stack on gathered attention, BERT-style token
//! corruption, cross-entropy over masked positions, a decoupled-decay
//! adaptive optimizer with a warmup/decay schedule, and versioned binary
//! checkpoints that resume bit-exactly.
//!
//! Everything is `f64` with fixed reduction orders, so a run is a pure
//! function of the configuration and seed.

mod checkpoint;
mod embedding;
mod encoder;
mod layers;
mod masking;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use embedding::EmbeddingTable;
pub use encoder::{
    masked_cross_entropy, EncoderLayer, MlmModel, MultiHeadAttention, SequenceClassifier,
    TokenClassifier,
};
pub use layers::{gelu, gelu_grad, LayerNorm, Linear};
pub use masking::{mlm_mask, MlmBatch, IGNORE_INDEX, MASK_TOKEN_ID, PAD_TOKEN_ID};
pub use optim::{schedule_factor, AdamW};
pub use train::{evaluate, BatchLoader, Corpus, CorpusDoc, EvalReport, Trainer};

use crate::attention::AttentionError;
use crate::mask::{MaskError, MaskStrategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Widest coordinate any 2D embedding table can look up, exclusive.
pub const MAX_2D_POSITIONS: usize = 1024;

/// Failures across the model stack.
#[derive(Error, Debug)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("token {index} has id {id}, vocabulary size is {vocab}")]
    TokenOutOfRange { index: usize, id: u32, vocab: usize },
    #[error("token {index} has coordinate {coord}, 2D tables cover 0..{max}")]
    CoordOutOfRange { index: usize, coord: u16, max: usize },
    #[error("sequence of {len} tokens exceeds the {max}-entry position table")]
    SequenceTooLong { len: usize, max: usize },
    #[error("loss became non-finite ({loss}) at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("batch loader stopped early at step {step}")]
    LoaderStopped { step: u64 },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Ocr(#[from] crate::ocr::OcrError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Architecture and masking-regime description. Field names follow the
/// conventional pretraining-config vocabulary so TOML/JSON configs read
/// like the usual hyperparameter tables.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Feed-forward hidden width; `None` means `4 * d_model`.
    #[serde(default)]
    pub d_ff: Option<usize>,
    #[serde(rename = "max_seq_length", default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(
        rename = "max_2d_position_embeddings",
        default = "default_max_2d_positions"
    )]
    pub max_2d_positions: usize,
    pub strategy: MaskStrategy,
    #[serde(default = "default_mlm_mask_prob")]
    pub mlm_mask_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_seq_len() -> usize {
    4096
}

fn default_max_2d_positions() -> usize {
    MAX_2D_POSITIONS
}

fn default_mlm_mask_prob() -> f64 {
    0.15
}

impl ModelConfig {
    /// Resolved feed-forward width.
    pub fn ffn_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    /// Per-head query/key width.
    pub fn head_width(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 3 {
            return Err(ModelError::Config(
                "vocab_size must be at least 3 to leave room for pad and mask ids".into(),
            ));
        }
        if self.d_model == 0 || self.num_heads == 0 {
            return Err(ModelError::Config(
                "d_model and num_heads must be positive".into(),
            ));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(ModelError::Config("max_seq_length must be positive".into()));
        }
        if self.max_2d_positions != MAX_2D_POSITIONS {
            return Err(ModelError::Config(format!(
                "max_2d_position_embeddings must be {MAX_2D_POSITIONS}, matching the \
                 coordinate normalizer"
            )));
        }
        if !(self.mlm_mask_prob > 0.0 && self.mlm_mask_prob < 1.0) {
            return Err(ModelError::Config(format!(
                "mlm_mask_prob must lie in (0, 1), got {}",
                self.mlm_mask_prob
            )));
        }
        if self.ffn_width() == 0 {
            return Err(ModelError::Config("d_ff must be positive".into()));
        }
        Ok(())
    }
}

/// Optimization schedule. Field names mirror the conventional table of
/// pretraining hyperparameters, so configs transcribe directly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    pub total_steps: u64,
    /// Only token-level masking is implemented; `true` is a config error.
    #[serde(default)]
    pub whole_word_masking: bool,
    #[serde(default = "default_loader_workers")]
    pub loader_workers: usize,
    #[serde(default = "default_queue_depth")]
    pub queue_depth: usize,
}

fn default_learning_rate() -> f64 {
    5e-5
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_warmup_ratio() -> f64 {
    0.1
}

fn default_loader_workers() -> usize {
    2
}

fn default_queue_depth() -> usize {
    4
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ModelError::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(ModelError::Config(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.total_steps == 0 {
            return Err(ModelError::Config("total_steps must be positive".into()));
        }
        if self.whole_word_masking {
            return Err(ModelError::Config(
                "whole_word_masking is not supported; only token-level masking is \
                 implemented, set it to false"
                    .into(),
            ));
        }
        if self.loader_workers == 0 || self.queue_depth == 0 {
            return Err(ModelError::Config(
                "loader_workers and queue_depth must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mutable view of one parameter tensor, handed to visitors in a fixed
/// model order so optimizer state and checkpoints line up by name.
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
    /// Whether weight decay applies; gains and biases opt out.
    pub decay: bool,
}

/// Seed stream reserved for parameter initialization; streams below
/// `1 << 32` belong to training steps and data corruption.
pub(crate) const INIT_STREAM: u64 = 1 << 32;

/// Seed stream for held-out evaluation corruption.
pub(crate) const EVAL_STREAM: u64 = (1 << 32) + 1;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
