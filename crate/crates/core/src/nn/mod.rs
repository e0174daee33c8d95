//! Dense-tensor transformer with hand-written exact gradients.
//!
//! The model is the paper pipeline's learner: a patch-projection encoder
//! over respiration tokens, a reconstruction decoder that predicts EEG
//! spectrogram bins during pretraining, and a frozen-encoder classifier
//! that emits a nightly score z in (0, 1). Everything is generic over
//! [`math::Scalar`], so f32 is the runtime type and f64 serves as a
//! reference mode for gradient checks.

pub mod checkpoint;
pub mod math;
pub mod model;
pub mod opt;
pub mod weights;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use math::{Mat, Scalar};
pub use model::{
    classifier_forward, classifier_loss_and_grads, decoder_forward, encoder_forward,
    loss_and_grads, patchify, Batch, BatchItem, LatentBatch, LatentItem, Mode,
};
pub use opt::{adamw_step, lr_schedule, AdamHyper, OptimizerState};
pub use weights::{Group, ModelWeights, ParamIds};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("signal has {len} samples, need at least {need} for one patch")]
    SignalTooShort { len: usize, need: usize },
    #[error("non-finite activations in {stage} block {block}")]
    NonFinite { stage: &'static str, block: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters. `patch_samples` counts 10 Hz respiration
/// samples per token, so the desk preset's 3000-sample patch spans five
/// minutes and a nine-hour night fits in 108 tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_enc_blocks: usize,
    pub n_heads: usize,
    pub n_dec_blocks: usize,
    pub n_cls_layers: usize,
    pub n_cls_heads: usize,
    pub patch_samples: usize,
    pub max_tokens: usize,
    pub spec_bins: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Small configuration sized for laptop-CPU runs.
    pub fn desk() -> Self {
        ModelConfig {
            embed_dim: 64,
            n_enc_blocks: 4,
            n_heads: 4,
            n_dec_blocks: 4,
            n_cls_layers: 2,
            n_cls_heads: 2,
            patch_samples: 3000,
            max_tokens: 120,
            spec_bins: 64,
            dropout_rate: 0.1,
        }
    }

    /// Full-scale configuration; expressible but not exercised in CI.
    pub fn paper() -> Self {
        ModelConfig {
            embed_dim: 768,
            n_enc_blocks: 8,
            n_heads: 8,
            n_dec_blocks: 8,
            n_cls_layers: 4,
            n_cls_heads: 4,
            patch_samples: 300,
            max_tokens: 1200,
            spec_bins: 961,
            dropout_rate: 0.1,
        }
    }

    /// Minimal configuration for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 16,
            n_enc_blocks: 2,
            n_heads: 2,
            n_dec_blocks: 2,
            n_cls_layers: 1,
            n_cls_heads: 2,
            patch_samples: 20,
            max_tokens: 8,
            spec_bins: 8,
            dropout_rate: 0.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::BadConfig(msg));
        if self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.embed_dim % self.n_cls_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a multiple of n_cls_heads {}",
                self.embed_dim, self.n_cls_heads
            ));
        }
        for (name, v) in [
            ("n_enc_blocks", self.n_enc_blocks),
            ("n_heads", self.n_heads),
            ("n_dec_blocks", self.n_dec_blocks),
            ("n_cls_layers", self.n_cls_layers),
            ("n_cls_heads", self.n_cls_heads),
            ("patch_samples", self.patch_samples),
            ("max_tokens", self.max_tokens),
            ("spec_bins", self.spec_bins),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} must be in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}
