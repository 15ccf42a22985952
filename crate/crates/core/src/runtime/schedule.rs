/// Linear warmup from 0 to `peak` over the first `warmup_fraction` of the
/// steps, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: f64,
}

impl LinearSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        Self {
            peak,
            total_steps,
            warmup_steps: warmup_fraction * total_steps as f64,
        }
    }

    /// Learning rate used by the update at `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        let s = step as f64;
        let t = self.total_steps as f64;
        let w = self.warmup_steps;
        if step >= self.total_steps {
            0.0
        } else if w > 0.0 && s <= w {
            self.peak * s / w
        } else {
            self.peak * (t - s) / (t - w)
        }
    }
}
