//! Centralized critic over the padded global observation, with running
//! return normalization.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consmac::NetConfig;
use crate::env::WorldState;
use crate::error::Result;
use crate::nn::{Activation, LayerSpec, Mlp, ParamStore};

/// Width added to the padded global observation: the two reward-lag states.
pub const LAG_FEATURES: usize = 2;

/// Critic input: the padded global observation followed by the formation and
/// navigation lag terms, without which the shared reward is not a function of
/// the observed state.
pub fn critic_input(state: &WorldState) -> Vec<f64> {
    let mut x = state.global_observation();
    x.push(state.prev_r_f);
    x.push(state.prev_r_v);
    x
}

pub fn critic_input_width(net: &NetConfig) -> usize {
    net.obs_width() + LAG_FEATURES
}

/// Three-layer MLP `[o_g || lags] -> hidden -> hidden -> 1`. Its output lives in
/// normalized units; see [`ValueNorm`].
#[derive(Debug, Clone)]
pub struct Critic {
    pub store: ParamStore,
    pub net: Mlp,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(input_width: usize, hidden: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let net = Mlp::new(
            &mut store,
            "critic",
            &LayerSpec::new(vec![input_width, hidden, hidden, 1], Activation::Identity),
            rng,
        );
        Self { store, net }
    }

    /// Normalized values, one per row.
    pub fn forward(&self, inputs: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward(&self.store, inputs)?.column(0).to_vec())
    }
}

/// Running mean/variance of value targets (parallel Welford merge).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ValueNorm {
    pub count: f64,
    pub mean: f64,
    pub m2: f64,
}

impl ValueNorm {
    const MIN_STD: f64 = 1e-4;

    pub fn update(&mut self, batch: &[f64]) {
        if batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        let mean = batch.iter().sum::<f64>() / n;
        let m2: f64 = batch.iter().map(|x| (x - mean).powi(2)).sum();
        let total = self.count + n;
        let delta = mean - self.mean;
        self.mean += delta * n / total;
        self.m2 += m2 + delta * delta * self.count * n / total;
        self.count = total;
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            return 1.0;
        }
        (self.m2 / self.count).sqrt().max(Self::MIN_STD)
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std()
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.std() + self.mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merged_statistics_match_direct() {
        let data: Vec<f64> = (0..50).map(|k| (k as f64 * 0.77).sin() * 10.0 - 3.0).collect();
        let mut vn = ValueNorm::default();
        vn.update(&data[..17]);
        vn.update(&data[17..]);
        let mean = data.iter().sum::<f64>() / 50.0;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 50.0;
        assert!((vn.mean - mean).abs() < 1e-12);
        assert!((vn.std() - var.sqrt()).abs() < 1e-12);
        for &x in &data {
            assert!((vn.denormalize(vn.normalize(x)) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_preserves_argmax() {
        let mut vn = ValueNorm::default();
        vn.update(&[-40.0, -10.0, -25.0]);
        let t = [-33.0, -12.5, -80.0, -13.0];
        let normed: Vec<f64> = t.iter().map(|&x| vn.normalize(x)).collect();
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax(&t), argmax(&normed));
    }

    #[test]
    fn empty_norm_is_identity() {
        let vn = ValueNorm::default();
        assert_eq!(vn.normalize(3.5), 3.5);
        assert_eq!(vn.denormalize(-2.0), -2.0);
    }
}
