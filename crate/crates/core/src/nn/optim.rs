use crate::error::{Error, Result};

use super::layers::Param;
use super::Scalar;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Applies one update. Any non-finite gradient aborts before a single
    /// parameter is touched.
    pub fn step<T: Scalar>(&mut self, params: Vec<&mut Param<T>>) -> Result<()> {
        if params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::TrainingDiverged {
                epoch: 0,
                step: self.t as usize + 1,
            });
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in params {
            for i in 0..p.value.len() {
                let g = p.grad[i].as_f64();
                let m = self.beta1 * p.m[i].as_f64() + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.v[i].as_f64() + (1.0 - self.beta2) * g * g;
                p.m[i] = T::from_f64_lossy(m);
                p.v[i] = T::from_f64_lossy(v);
                let upd = self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                p.value[i] = T::from_f64_lossy(p.value[i].as_f64() - upd);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve on its best value by more than `threshold` for
/// `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            factor,
            patience,
            threshold,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one epoch's loss; returns the learning-rate multiplier.
    pub fn step(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if !(loss < b - self.threshold) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.bad_epochs = 0;
                    return self.factor;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        1.0
    }
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(0.1, 2, 1e-4)
    }
}

/// 1-based epochs at which a scheduler fed `history` reduces the rate.
pub fn plateau_reductions(history: &[f64], factor: f64, patience: usize, threshold: f64) -> Vec<usize> {
    let mut s = PlateauScheduler::new(factor, patience, threshold);
    history
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (s.step(l) != 1.0).then_some(i + 1))
        .collect()
}
