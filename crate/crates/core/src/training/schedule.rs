//! Reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    wait: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Record an epoch's monitored loss; returns the learning rate for the
    /// next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr *= self.factor;
                self.wait = 0;
            }
        }
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_stagnant_epochs_divide_lr_by_ten() {
        let mut p = Plateau::new(1e-3, 0.1, 10, 1e-4);
        p.observe(0.5);
        for _ in 0..9 {
            assert_eq!(p.observe(0.5), 1e-3);
        }
        assert!((p.observe(0.5) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn steady_improvement_keeps_lr() {
        let mut p = Plateau::new(1e-3, 0.1, 10, 1e-4);
        for e in 0..100 {
            assert_eq!(p.observe(1.0 - e as f64 * 1e-3), 1e-3);
        }
    }

    #[test]
    fn gains_below_threshold_count_as_stagnation() {
        let mut p = Plateau::new(1.0, 0.5, 2, 1e-4);
        p.observe(1.0);
        p.observe(1.0 - 5e-5);
        assert_eq!(p.observe(1.0 - 9e-5), 0.5);
        assert_eq!(p.best(), 1.0);
    }

    #[test]
    fn negative_losses_are_handled() {
        let mut p = Plateau::new(1.0, 0.1, 1, 1e-4);
        p.observe(-0.2);
        assert_eq!(p.observe(-0.3), 1.0);
        assert!((p.observe(-0.3) - 0.1).abs() < 1e-15);
    }
}
