/// Linear warm-up to `max_lr`, then constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub max_lr: f64,
    pub warmup_epochs: u32,
}

impl WarmupSchedule {
    pub fn new(max_lr: f64, warmup_epochs: u32) -> Self {
        Self {
            max_lr,
            warmup_epochs: warmup_epochs.max(1),
        }
    }

    /// Learning rate for 1-based `epoch`.
    pub fn lr(&self, epoch: u32) -> f64 {
        self.max_lr * (epoch as f64 / self.warmup_epochs as f64).min(1.0)
    }
}
