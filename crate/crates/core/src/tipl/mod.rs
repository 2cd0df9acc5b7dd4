//! Causal transformer over coded weight snapshots.

mod model;
mod train;

pub use model::{init_model, parameter_layout, TiplModel};
pub use train::{eval_loss, sample_batch, train, SegmentBatch, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TiplConfig {
    pub d_token: usize,
    /// Context length `K`.
    pub context_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub batches_per_iter: usize,
    pub iters: usize,
    pub grad_clip: f64,
    pub anchor: TokenAnchor,
    /// Per-coordinate scale of window offsets when anchored; fitted by
    /// `train` from the data when empty.
    pub offset_scale: Vec<f64>,
}

/// Frame in which the network sees tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenAnchor {
    /// Codes as given.
    #[default]
    Absolute,
    /// Offsets from the first token of each window, divided by
    /// `offset_scale`. Predictions are mapped back to absolute codes.
    Window,
}

impl Default for TiplConfig {
    fn default() -> Self {
        Self {
            d_token: 16,
            context_len: 20,
            embed_dim: 128,
            layers: 3,
            heads: 1,
            dropout: 0.1,
            lr: 1e-4,
            warmup_steps: 1000,
            weight_decay: 1e-4,
            batch_size: 64,
            batches_per_iter: 2000,
            iters: 10,
            grad_clip: 0.25,
            anchor: TokenAnchor::Absolute,
            offset_scale: Vec::new(),
        }
    }
}

impl std::str::FromStr for TokenAnchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Self::Absolute),
            "window" => Ok(Self::Window),
            _ => Err(Error::Config(format!("unknown token anchor {s:?}; expected absolute or window"))),
        }
    }
}

impl TiplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_token == 0 || self.embed_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("d_token, embed_dim, layers and heads must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context length must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if !self.offset_scale.is_empty()
            && (self.offset_scale.len() != self.d_token || self.offset_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)))
        {
            return Err(Error::Config(format!(
                "offset_scale needs {} positive finite entries",
                self.d_token
            )));
        }
        Ok(())
    }

    /// Learning rate after `step` optimizer steps: linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}
