use std::f64::consts::PI;

/// Step decay: `initial * decay^floor(epoch / step_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub step_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.001,
            decay: 0.5,
            step_epochs: 20,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.step_epochs.max(1)) as i32;
        self.initial * self.decay.powi(steps)
    }
}

/// Cosine anneal of the Gumbel-softmax temperature, per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        Self {
            start: 2.0,
            end: 0.5,
        }
    }
}

impl GumbelSchedule {
    /// `end + (start - end) * (1 + cos(pi * epoch / (epochs - 1))) / 2`; a
    /// single-epoch run stays at `start`.
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        let t = epoch as f64 / (epochs - 1) as f64;
        self.end + (self.start - self.end) * (1.0 + (PI * t).cos()) / 2.0
    }
}

/// Learning rate of `epoch` under the default schedule.
pub fn lr_at(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}

/// Gumbel temperature of `epoch` out of `epochs` under the default schedule.
pub fn gumbel_tau_at(epoch: usize, epochs: usize) -> f64 {
    GumbelSchedule::default().at(epoch, epochs)
}
