//! Multi-task training: per-variant loss assembly, order-swap sampling,
//! Adam with global-norm clipping, the training loop, checkpoints and
//! JSONL metrics.

mod checkpoint;
mod data;
mod step;

use std::io;

use thiserror::Error;

use crate::model::{ModelError, Variant};
use crate::nets::NetError;

pub use checkpoint::{load_checkpoint, read_container, save_checkpoint, tensor_text, text_tensor, write_container, CHECKPOINT_VERSION, MAGIC};
pub use data::{order_swap_sample, Batch, Batcher, Dataset, OrderSample, Utterance};
pub use step::{compute_loss, evaluate, order_accuracy, run_training, train_step, Adam, LossVars, MetricsRecord, TrainState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a checkpoint")]
    NotACheckpoint,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("NaN in {0}")]
    NotFinite(&'static str),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("data: {0}")]
    Data(String),
    #[error("train config: {0}")]
    Config(String),
}

impl From<NetError> for TrainError {
    fn from(e: NetError) -> Self {
        TrainError::Model(ModelError::Net(e))
    }
}

impl TrainError {
    pub(crate) fn io(path: &std::path::Path, source: io::Error) -> Self {
        TrainError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    /// λ in `total = mel_mse + stop_bce + λ·task_loss`.
    pub task_weight: f64,
    pub swap_prob: f64,
    pub seed: u64,
    /// Global L2 norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Metrics cadence `k`.
    pub log_every: u64,
    /// Checkpoint cadence; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::NextTask,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-6,
            batch_size: 4,
            max_iters: 100_000,
            task_weight: 1.0,
            swap_prob: 0.5,
            seed: 0,
            grad_clip: 1.0,
            log_every: 100,
            checkpoint_every: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return bad("swap_prob must lie in [0, 1]");
        }
        if !(self.task_weight >= 0.0) {
            return bad("task_weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("adam_eps must be positive; weight_decay and grad_clip non-negative");
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive");
        }
        Ok(())
    }
}

/// Loss terms of one batch, as evaluated in 32-bit arithmetic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mel_mse: f32,
    pub stop_bce: f32,
    pub task_loss: f32,
    pub total: f32,
}

impl LossBreakdown {
    /// `mel_mse + stop_bce + λ·task_loss`, in the same order and precision
    /// as the training graph.
    pub fn compose(mel_mse: f32, stop_bce: f32, task_loss: f32, task_weight: f64) -> Self {
        let total = (mel_mse + stop_bce) + (task_weight as f32) * task_loss;
        LossBreakdown { mel_mse, stop_bce, task_loss, total }
    }

    pub fn check_finite(&self) -> Result<(), TrainError> {
        for (name, v) in [("mel_mse", self.mel_mse), ("stop_bce", self.stop_bce), ("task_loss", self.task_loss), ("total", self.total)] {
            if !v.is_finite() {
                return Err(TrainError::NotFinite(name));
            }
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed derived from a base seed and a path of indices.
pub(crate) fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}
