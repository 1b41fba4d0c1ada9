//! The three trainable networks: the dropout segmenter, the point-promptable
//! segmenter and the adaptation network, plus click sampling and checkpoints.

mod adapter;
mod checkpoint;
mod promptable;
mod segmenter;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{ensure, Error, Result};
use crate::nn::UNetConfig;

pub use adapter::{train_adapter, Adapter};
pub use checkpoint::{Checkpoint, ModelKind, ModelState, CHECKPOINT_SCHEMA_VERSION};
pub use promptable::{
    fine_tune_promptable, iterative_click_sampling, ClickPolicy, PointPromptNet, PromptableSegmenter, DEFAULT_PROMPT_SIGMA,
};
pub use segmenter::{mean_two_pass_kl, train_ssl, Segmenter, SslStepStats};
pub use train::TrainConfig;

/// Backbone hyper-parameters shared by all three networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout: f32,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            depth: 4,
            dropout: 0.1,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels >= 1, Config, "in_channels must be >= 1");
        ensure!(self.base_channels >= 1, Config, "base_channels must be >= 1");
        ensure!((1..=8).contains(&self.depth), Config, "depth {} outside 1..=8", self.depth);
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            Config,
            "dropout {} outside [0, 1)",
            self.dropout
        );
        Ok(())
    }

    /// Non-fatal problems, e.g. a zero dropout rate that makes the two-pass KL vanish.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.dropout == 0.0 {
            out.push("dropout is 0: both forward passes coincide and the KL consistency term is always 0".into());
        }
        out
    }

    pub(crate) fn unet(&self, in_channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            base_channels: self.base_channels,
            depth: self.depth,
            dropout: self.dropout,
        }
    }
}

/// Adapter backbone; the input is always the (image, pseudo-label) pair.
pub type AdapterConfig = SegmenterConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
}

impl PointPrompt {
    pub fn positive(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            polarity: Polarity::Positive,
        }
    }
}

/// A uniformly random foreground pixel of `mask`.
pub fn sample_random_click(mask: &Mask, seed: u64) -> Result<PointPrompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_click_with(mask, &mut rng)
}

pub(crate) fn random_click_with<R: Rng + ?Sized>(mask: &Mask, rng: &mut R) -> Result<PointPrompt> {
    let fg = mask.foreground();
    if fg.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (row, col) = fg[rng.random_range(0..fg.len())];
    Ok(PointPrompt::positive(row, col))
}
