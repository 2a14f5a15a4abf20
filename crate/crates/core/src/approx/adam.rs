use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{check_dim, Result};

/// Hyperparameters of the adaptive-moment optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before the moment update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradient contained NaN/Inf; parameters and moments untouched.
    SkippedNonFinite,
}

/// Per-parameter moment accumulators for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step_count: u64,
    skipped: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step_count: 0,
            skipped: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Number of updates rejected for non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore(&mut self, step_count: u64, m: Vec<T>, v: Vec<T>) -> Result<()> {
        check_dim("adam first moment", self.m.len(), m.len())?;
        check_dim("adam second moment", self.v.len(), v.len())?;
        self.step_count = step_count;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One bias-corrected update of `params` along `grads`.
    ///
    /// An all-zero gradient leaves `params` exactly as they are (moments still
    /// decay and the step counter still advances).
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<StepOutcome> {
        check_dim("adam parameters", self.m.len(), params.len())?;
        check_dim("adam gradients", self.m.len(), grads.len())?;
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(StepOutcome::SkippedNonFinite);
        }
        let cfg = self.config;
        let scale = match cfg.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .fold(T::zero(), |acc, &g| acc + g * g)
                    .sqrt()
                    .to_f64()
                    .unwrap_or(f64::INFINITY);
                if norm > max {
                    T::of(max / norm)
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        self.step_count += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let t = self.step_count as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::of(cfg.lr);
        let eps = T::of(cfg.eps);
        let apply = grads.iter().any(|&g| g != T::zero());
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g * scale;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            if apply {
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}
