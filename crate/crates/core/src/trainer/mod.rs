//! Training loop, evaluation, k-fold driver, and per-epoch history.
//!
//! Determinism: every random draw forks from the run seed by purpose and
//! position (epoch shuffle, per-sample dropout, per-fold init), and batch
//! gradients are summed in sample order whatever the thread count.

mod data;
mod history;
mod optim;
mod train;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};

pub use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{synthetic_task, write_synthetic_task, ImageStore, Normalization, SyntheticTask};
pub use history::{parse_history_csv, EpochRecord, HistoryRow, TrainHistory, HISTORY_CSV_HEADER};
pub use optim::{adamw_update, decays, sgd_momentum_update, Hyper, Optimizer};
pub use train::{evaluate, evaluate_scores, run_folds, train, train_any, train_from, Evaluation, FoldOutcome, FoldsOutcome, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Optimizer, schedule, and run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Decoupled decay for AdamW on `.weight`/`.kernel` tensors; ignored by SGD.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a lower validation loss and keep
    /// the best epoch's parameters.
    pub patience: Option<usize>,
    pub precision: Precision,
    /// Optimizer steps over which the learning rate ramps linearly from
    /// `lr/warmup_steps` to `lr`.
    pub warmup_steps: usize,
    /// Worker threads; 0 means all available.
    pub jobs: usize,
    /// Fill the history `seconds` column. Off by default so reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adamw,
            learning_rate: 5e-4,
            weight_decay: 3e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            momentum: 0.9,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            patience: None,
            precision: Precision::F64,
            warmup_steps: 0,
            jobs: 1,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CctError::Parameter(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("momentum", self.momentum)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1 when set".into());
        }
        Ok(())
    }

    /// Learning rate for 0-based optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps as u64 {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}
