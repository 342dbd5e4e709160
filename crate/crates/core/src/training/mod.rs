//! Joint contrastive + captioning training with validation-based model
//! selection.

mod losses;
mod optim;
mod trainer;

pub use losses::{argmax, caption_loss, contrastive_loss, CaptionLoss};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use trainer::{
    batch_labels, load_checkpoint, read_metrics, save_checkpoint, split_indices, teacher_forcing, write_metrics, Checkpoint,
    CheckpointMeta, RngState, RunSettings, StepLog, TrainOutcome, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, LAST_OPTIMIZER,
    METRICS_FILE,
};

use serde::{Deserialize, Serialize};

use crate::error::{bail_config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cap: f64,
    pub lambda_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cap: 1.0,
            lambda_con: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub temperature_init: f64,
    pub eval_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 8,
            warmup_steps: 300,
            lr: 1e-4,
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            temperature_init: 0.07,
            eval_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            bail_config!("train.steps must be positive");
        }
        if self.warmup_steps > self.steps {
            bail_config!("train.warmup_steps ({}) exceeds train.steps ({})", self.warmup_steps, self.steps);
        }
        if self.batch_size < 2 {
            bail_config!("train.batch_size must be at least 2 for the contrastive loss");
        }
        if !(self.lr > 0.0) {
            bail_config!("train.lr must be positive");
        }
        if self.loss.lambda_cap < 0.0 || self.loss.lambda_con < 0.0 {
            bail_config!("loss weights must be non-negative");
        }
        if !(self.temperature_init > 0.0) {
            bail_config!("train.temperature_init must be positive");
        }
        if self.eval_interval == 0 {
            bail_config!("train.eval_interval must be positive");
        }
        self.optimizer.validate()
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// 0 at `steps`.
pub fn lr_schedule(step: u64, steps: u64, warmup: u64, peak: f64) -> f64 {
    let step = step.min(steps);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if steps == warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (steps - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Mean `l_total` over the `window` steps ending at `step`, or `None` when
/// the history does not cover them all.
pub fn smoothed_loss(history: &[StepLog], step: u64, window: u64) -> Option<f64> {
    if window == 0 || step < window {
        return None;
    }
    let first = step + 1 - window;
    let vals: Vec<f64> = history
        .iter()
        .filter(|l| (first..=step).contains(&l.step))
        .map(|l| l.l_total)
        .collect();
    (vals.len() as u64 == window).then(|| vals.iter().sum::<f64>() / window as f64)
}

/// Teacher-forced metrics of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_cap: f64,
    pub l_total: f64,
    pub token_top1_acc: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let s = |t| lr_schedule(t, 10_000, 300, 1e-4);
        assert_eq!(s(0), 0.0);
        assert!((s(150) - 5e-5).abs() < 1e-15);
        assert!((s(300) - 1e-4).abs() < 1e-15);
        assert!(s(10_000).abs() < 1e-15);
        assert!(s(5_000) < s(1_000));
    }

    #[test]
    fn warmup_cannot_exceed_steps() {
        let cfg = TrainConfig {
            steps: 100,
            warmup_steps: 101,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn smoothing_window() {
        let h: Vec<StepLog> = (1..=10)
            .map(|s| StepLog {
                step: s,
                l_con: 0.0,
                l_cap: 0.0,
                l_total: s as f64,
                val_acc: None,
                lr: 0.0,
            })
            .collect();
        assert_eq!(smoothed_loss(&h, 10, 4), Some(8.5));
        assert_eq!(smoothed_loss(&h, 3, 4), None);
        assert_eq!(smoothed_loss(&h, 12, 4), None);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_cap, w.lambda_con), (1.0, 0.1));
    }
}
