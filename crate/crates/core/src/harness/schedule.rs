//! Cosine learning-rate decay from the initial rate to zero.

/// `lr(step) = 0.5 * initial * (1 + cos(pi * step / total_steps))`.
#[derive(Debug, Clone)]
pub struct CosineSchedule {
    initial: f64,
    total_steps: usize,
}

impl CosineSchedule {
    pub fn new(initial: f64, total_steps: usize) -> Self {
        assert!(total_steps > 0, "schedule needs at least one step");
        CosineSchedule {
            initial,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = (step.min(self.total_steps) as f64) / (self.total_steps as f64);
        0.5 * self.initial * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
