//! Optimizer, learning-rate schedule and the training loop.

mod adam;
mod trainer;

pub use adam::Adam;
pub use trainer::{Example, HistoryRow, StepReport, TrainSummary, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Randomly permute the embedding streams together with their targets.
    pub swap_augment: bool,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 1e-6,
            warmup_epochs: 10,
            plateau_patience: 3,
            plateau_factor: 0.9,
            early_stop_patience: 10,
            batch_size: 1,
            max_epochs: 100,
            max_steps: None,
            seed: 0,
            loss_weights: LossWeights::default(),
            swap_augment: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lr_min && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor {} not in (0, 1)",
                self.plateau_factor
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        let w = self.loss_weights;
        if !(w.mag >= 0.0 && w.sisdr >= 0.0 && w.mag + w.sisdr > 0.0) {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        Ok(())
    }
}

/// Loop bookkeeping that survives a checkpoint round trip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub current_lr: f64,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
    /// Post-warmup rate, lowered on validation plateaus.
    pub plateau_lr: f64,
    pub plateau_count: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            current_lr: lr_at(0, None, cfg),
            best_val_loss: None,
            best_epoch: None,
            epochs_since_best: 0,
            plateau_lr: cfg.lr_max,
            plateau_count: 0,
        }
    }

    /// Records the validation loss of `epoch`; returns whether it improved.
    /// Plateau reductions only happen once warmup is over.
    pub fn observe(&mut self, epoch: usize, val_loss: f64, cfg: &TrainConfig) -> bool {
        let improved = self.best_val_loss.map_or(true, |b| val_loss < b);
        if improved {
            self.best_val_loss = Some(val_loss);
            self.best_epoch = Some(epoch);
            self.epochs_since_best = 0;
            self.plateau_count = 0;
        } else {
            self.epochs_since_best += 1;
            if epoch >= cfg.warmup_epochs {
                self.plateau_count += 1;
                if self.plateau_count >= cfg.plateau_patience {
                    self.plateau_lr = (self.plateau_lr * cfg.plateau_factor).max(cfg.lr_min);
                    self.plateau_count = 0;
                }
            }
        }
        self.epoch = epoch + 1;
        self.current_lr = lr_at(self.epoch, Some(self), cfg);
        improved
    }

    pub fn should_stop(&self, cfg: &TrainConfig) -> bool {
        self.epochs_since_best >= cfg.early_stop_patience
    }
}

/// Learning rate of `epoch`: a half-cosine ramp from `lr_min` to `lr_max`
/// over the warmup epochs, then the plateau-controlled rate.
pub fn lr_at(epoch: usize, state: Option<&TrainState>, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        let x = epoch as f64 / cfg.warmup_epochs as f64;
        return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 - (std::f64::consts::PI * x).cos()) / 2.0;
    }
    state.map_or(cfg.lr_max, |s| s.plateau_lr)
}
