use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameter matrices with gradient buffers and Adam moments.
///
/// Biases are stored as `1 x width` matrices so every parameter is 2-D.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let shape = value.raw_dim();
        self.params.push(Param {
            name: name.into(),
            grad: Array2::zeros(shape),
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].grad
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.mapv_inplace(|g| g * s);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// One bias-corrected Adam update over every parameter, then zeroes the
    /// gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            Zip::from(&mut p.value)
                .and(&mut p.grad)
                .and(&mut p.m)
                .and(&mut p.v)
                .for_each(|w, g, m, v| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * *g * *g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                    *g = 0.0;
                });
        }
    }

    /// Copies parameter values (not optimizer state) from a store with the
    /// same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::SizeMismatch {
                what: "parameter count",
                expected: self.params.len(),
                got: other.params.len(),
            });
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.value.dim() != src.value.dim() {
                return Err(Error::CheckpointShape {
                    name: dst.name.clone(),
                    found: src.value.shape().to_vec(),
                    expected: dst.value.shape().to_vec(),
                });
            }
            dst.value.assign(&src.value);
        }
        Ok(())
    }

    /// Values flattened in parameter order; used for bit-exact comparisons.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[1.0, -2.0]]);
        s.adam_step(&AdamConfig::with_lr(1e-4));
        assert_eq!(s.value(id), &array![[1.0, -2.0]]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[0.5]]);
        s.grad_mut(id)[[0, 0]] = 1.0;
        s.adam_step(&AdamConfig::with_lr(1e-4));
        let delta = 0.5 - s.value(id)[[0, 0]];
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert!((delta - 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.grad(id)[[0, 0]], 0.0);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[0.0]]);
        let mut last = 0.0;
        for _ in 0..2 {
            s.grad_mut(id)[[0, 0]] = 3.0;
            s.adam_step(&AdamConfig::with_lr(1e-3));
            let now = s.value(id)[[0, 0]];
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn clipping_never_increases_norm() {
        let mut s = ParamStore::new();
        let a = s.add("a", array![[3.0, 0.0]]);
        let b = s.add("b", array![[0.0]]);
        s.grad_mut(a).assign(&array![[3.0, 0.0]]);
        s.grad_mut(b).assign(&array![[4.0]]);
        let before = s.clip_grad_norm(1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
        let again = s.clip_grad_norm(10.0);
        assert!((again - s.grad_norm()).abs() < 1e-15);
    }
}
