use super::Scalar;
use crate::error::{check_dim, Result};

/// Running per-dimension mean/variance used to whiten network inputs and
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<T> {
    mean: Vec<T>,
    var: Vec<T>,
    count: T,
    min_std: T,
}

impl<T: Scalar> Normalizer<T> {
    /// Identity normalizer (zero mean, unit variance, no observations yet).
    pub fn new(dim: usize, min_std: T) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            var: vec![T::one(); dim],
            count: T::zero(),
            min_std,
        }
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>, count: T, min_std: T) -> Result<Self> {
        check_dim("normalizer variance", mean.len(), var.len())?;
        Ok(Self {
            mean,
            var,
            count,
            min_std,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn var(&self) -> &[T] {
        &self.var
    }

    pub fn count(&self) -> T {
        self.count
    }

    pub fn min_std(&self) -> T {
        self.min_std
    }

    /// Merge the statistics of `batch` row-major samples.
    pub fn update(&mut self, data: &[T], batch: usize) -> Result<()> {
        let d = self.dim();
        check_dim("normalizer batch", batch * d, data.len())?;
        if batch == 0 {
            return Ok(());
        }
        let n_b = T::of(batch as f64);
        let mut b_mean = vec![T::zero(); d];
        for row in data.chunks_exact(d) {
            for (m, &x) in b_mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut b_mean {
            *m /= n_b;
        }
        let mut b_m2 = vec![T::zero(); d];
        for row in data.chunks_exact(d) {
            for ((s, &x), &m) in b_m2.iter_mut().zip(row).zip(&b_mean) {
                *s += (x - m) * (x - m);
            }
        }
        if self.count == T::zero() {
            self.mean = b_mean;
            self.var = b_m2.into_iter().map(|s| s / n_b).collect();
            self.count = n_b;
            return Ok(());
        }
        let n_a = self.count;
        let total = n_a + n_b;
        for i in 0..d {
            let delta = b_mean[i] - self.mean[i];
            let m2 = self.var[i] * n_a + b_m2[i] + delta * delta * n_a * n_b / total;
            self.mean[i] += delta * n_b / total;
            self.var[i] = (m2 / total).max(T::zero());
        }
        self.count = total;
        Ok(())
    }

    /// Per-dimension scale used by [`normalize`](Self::normalize).
    pub fn std(&self) -> Vec<T> {
        self.var
            .iter()
            .map(|v| v.sqrt().max(self.min_std))
            .collect()
    }

    /// Whiten rows in place (`data.len()` must be a multiple of `dim`).
    pub fn normalize_in_place(&self, data: &mut [T]) {
        let std = self.std();
        for row in data.chunks_exact_mut(self.dim()) {
            for ((x, &m), &s) in row.iter_mut().zip(&self.mean).zip(&std) {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn denormalize_in_place(&self, data: &mut [T]) {
        let std = self.std();
        for row in data.chunks_exact_mut(self.dim()) {
            for ((x, &m), &s) in row.iter_mut().zip(&self.mean).zip(&std) {
                *x = *x * s + m;
            }
        }
    }

    pub fn normalize(&self, x: &[T]) -> Vec<T> {
        let mut out = x.to_vec();
        self.normalize_in_place(&mut out);
        out
    }

    pub fn denormalize(&self, z: &[T]) -> Vec<T> {
        let mut out = z.to_vec();
        self.denormalize_in_place(&mut out);
        out
    }
}
