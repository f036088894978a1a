use crate::error::{Error, Result};

use super::sgd::SgdConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_iters: usize,
    pub batch_size: usize,
    /// Width of the random training crop; crops are skipped when the image
    /// is not wider than this.
    pub crop_width: usize,
    pub flip_prob: f64,
    pub seed: u64,
    /// Nearest-neighbor resize applied after projection.
    pub upsample_to: Option<(usize, usize)>,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Train only the point layer and head.
    pub freeze_net2d: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01875,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 120,
            warmup_iters: 1000,
            batch_size: 24,
            crop_width: 1025,
            flip_prob: 0.5,
            seed: 0,
            upsample_to: Some((145, 2049)),
            max_steps: None,
            checkpoint_every: 0,
            freeze_net2d: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::argument("base_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::argument("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::argument("weight_decay must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.crop_width == 0 {
            return Err(Error::argument("epochs, batch_size and crop_width must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::argument("flip_prob must lie in [0, 1]"));
        }
        if let Some((h, w)) = self.upsample_to {
            if h == 0 || w == 0 {
                return Err(Error::argument("upsample target must be at least 1x1"));
            }
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Steps in a run over `num_scans` scans: one crop per scan per epoch.
    pub fn total_steps(&self, num_scans: usize) -> usize {
        let full = self.epochs * num_scans.div_ceil(self.batch_size);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// Checks that the schedule is well defined for a run of `total` steps.
    pub fn validate_schedule(&self, total: usize) -> Result<()> {
        if total <= self.warmup_iters {
            return Err(Error::argument(format!(
                "run of {total} steps does not outlast the {}-step warmup",
                self.warmup_iters
            )));
        }
        Ok(())
    }
}
