use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay to a floor, resolved per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        if !(0.0 <= self.floor_lr && self.floor_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "need 0 <= floor_lr ({}) <= peak_lr ({})",
                self.floor_lr, self.peak_lr
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }
}

/// Learning rate at optimizer step `step` (0-based, inclusive of the final
/// step `total_steps`).
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    let total = cfg.total_steps();
    let warmup = cfg.warmup_steps();
    if step > total {
        return Err(Error::Contract(format!("step {step} beyond schedule end {total}")));
    }
    if step < warmup {
        return Ok(cfg.peak_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + (PI * progress).cos()))
}
