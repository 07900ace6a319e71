//! Warm-up then linear keep-ratio decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    /// Keep ratio reached on the final epoch.
    pub r_target: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_epochs: 500,
            warmup_epochs: 150,
            r_target: 0.75,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_target > 0.0 && self.r_target <= 1.0) {
            return Err(Error::Config(format!(
                "schedule.r_target = {} must be in (0, 1]",
                self.r_target
            )));
        }
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "schedule.warmup_epochs = {} must be below total_epochs = {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    /// Keep ratio after the last epoch, used for evaluation.
    pub fn final_ratio(&self) -> f64 {
        match self.total_epochs {
            0 => 1.0,
            n => sparsity_schedule(n - 1, self),
        }
    }
}

/// `1` for `epoch < warmup`, then linear from `1` at `warmup` to `r_target`
/// at `total_epochs - 1`. Epochs past the end stay at `r_target`.
pub fn sparsity_schedule(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return 1.0;
    }
    let last = cfg.total_epochs.saturating_sub(1);
    if epoch >= last {
        return cfg.r_target;
    }
    let span = (last - cfg.warmup_epochs) as f64;
    let t = (epoch - cfg.warmup_epochs) as f64 / span;
    1.0 - (1.0 - cfg.r_target) * t
}
