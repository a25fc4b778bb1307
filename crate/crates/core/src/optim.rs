//! Plain SGD with a fixed or linear-warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Fixed,
    /// Linear ramp from 0 to the peak over the warm-up epochs, then
    /// `peak * 0.5 * (1 + cos(pi * i / I))` over the remaining iterations.
    WarmupCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("warmup_epochs ({warmup}) must be smaller than total_epochs ({total})")]
    BadWarmup { warmup: usize, total: usize },
    #[error("params ({params}) and grads ({grads}) differ in length")]
    LengthMismatch { params: usize, grads: usize },
    #[error("non-finite gradient at index {index}: {value}")]
    NonFiniteGradient { index: usize, value: f64 },
}

impl SgdConfig {
    pub fn fixed(learning_rate: f64) -> Self {
        SgdConfig { learning_rate, schedule: LrSchedule::Fixed, warmup_epochs: 0, total_epochs: 1 }
    }

    pub fn warmup_cosine(learning_rate: f64, warmup_epochs: usize, total_epochs: usize) -> Self {
        SgdConfig { learning_rate, schedule: LrSchedule::WarmupCosine, warmup_epochs, total_epochs }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.learning_rate <= 0.0 {
            return Err(OptimError::BadLearningRate(self.learning_rate));
        }
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(OptimError::BadWarmup { warmup: self.warmup_epochs, total: self.total_epochs });
        }
        Ok(())
    }

    /// Learning rate for the 0-based global `iteration`, given a known
    /// number of iterations per epoch.
    pub fn learning_rate_at(&self, iteration: usize, iters_per_epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Fixed => self.learning_rate,
            LrSchedule::WarmupCosine => {
                let warm = self.warmup_epochs * iters_per_epoch;
                let total = self.total_epochs * iters_per_epoch;
                if iteration < warm {
                    self.learning_rate * (iteration + 1) as f64 / warm as f64
                } else {
                    let i = (iteration - warm).min(total.saturating_sub(warm));
                    let span = (total - warm).max(1);
                    self.learning_rate
                        * 0.5
                        * (1.0 + (std::f64::consts::PI * i as f64 / span as f64).cos())
                }
            }
        }
    }
}

/// One in-place step `p <- p - lr * g`. Rejects non-finite gradients.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], lr: T) -> Result<(), OptimError> {
    if params.len() != grads.len() {
        return Err(OptimError::LengthMismatch { params: params.len(), grads: grads.len() });
    }
    for (i, &g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGradient { index: i, value: g.as_f64() });
        }
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = *p - lr * g;
    }
    Ok(())
}

/// Scheduled variant: looks the learning rate up from the config first.
pub fn sgd_step_scheduled<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    config: &SgdConfig,
    iteration: usize,
    iters_per_epoch: usize,
) -> Result<(), OptimError> {
    let lr = config.learning_rate_at(iteration, iters_per_epoch);
    sgd_step(params, grads, T::of_f64(lr))
}
