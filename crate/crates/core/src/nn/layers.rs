use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::orthogonal;
use super::ops::{softmax_rows, softmax_rows_backward};
use super::store::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Softmax,
}

impl Activation {
    fn apply(self, z: Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.mapv_into(f64::tanh),
            Activation::Sigmoid => z.mapv_into(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Softmax => softmax_rows(&z),
        }
    }

    /// Gradient w.r.t. the pre-activation, given the activation output `y`.
    fn backward(self, y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => dy.clone(),
            Activation::Tanh => dy * &y.mapv(|v| 1.0 - v * v),
            Activation::Sigmoid => dy * &y.mapv(|v| v * (1.0 - v)),
            Activation::Softmax => softmax_rows_backward(y, dy),
        }
    }
}

/// Affine map `x W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), orthogonal(in_dim, out_dim, gain, rng));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, out_dim)));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim {
            return Err(Error::SizeMismatch {
                what: "linear input width",
                expected: self.in_dim,
                got: x.ncols(),
            });
        }
        Ok(x.dot(store.value(self.w)) + store.value(self.b))
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        let dx = want_dx.then(|| dy.dot(&store.value(self.w).t()));
        *store.grad_mut(self.w) += &x.t().dot(dy);
        *store.grad_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dx
    }
}

/// Layer widths and activations for an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// `[input, hidden.., output]`
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    /// Orthogonal-init gain of the last layer.
    pub output_gain: f64,
}

impl LayerSpec {
    pub fn new(widths: Vec<usize>, output: Activation) -> Self {
        Self {
            widths,
            hidden: Activation::Tanh,
            output,
            output_gain: 1.0,
        }
    }

    pub fn with_output_gain(mut self, gain: f64) -> Self {
        self.output_gain = gain;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Per-layer inputs and the final output, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: &LayerSpec, rng: &mut R) -> Self {
        assert!(spec.widths.len() >= 2, "an MLP needs input and output widths");
        let n = spec.widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { spec.output_gain } else { 1.0 };
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    spec.widths[i],
                    spec.widths[i + 1],
                    gain,
                    rng,
                )
            })
            .collect();
        Self {
            layers,
            hidden: spec.hidden,
            output: spec.output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &Array2<f64>) -> Result<MlpCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(store, &cur)?;
            let act = if i + 1 == self.layers.len() {
                self.output
            } else {
                self.hidden
            };
            inputs.push(cur);
            cur = act.apply(z);
        }
        Ok(MlpCache { inputs, output: cur })
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(store, x)?.output)
    }

    /// Backpropagates `d_out` (gradient w.r.t. the activated output).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        d_out: &Array2<f64>,
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        let n = self.layers.len();
        let mut dy = d_out.clone();
        for i in (0..n).rev() {
            let (act, y) = if i + 1 == n {
                (self.output, &cache.output)
            } else {
                (self.hidden, &cache.inputs[i + 1])
            };
            let dz = act.backward(y, &dy);
            let need = want_dx || i > 0;
            dy = self.layers[i].backward(store, &cache.inputs[i], &dz, need)?;
        }
        Some(dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &LayerSpec::new(vec![3, 4, 2], Activation::Identity), &mut rng);
        for p in store.params_mut() {
            p.value.fill(0.0);
        }
        let y = mlp.forward(&store, &array![[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(y, array![[0.0, 0.0]]);
    }

    #[test]
    fn single_affine_layer_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &LayerSpec::new(vec![1, 1], Activation::Identity), &mut rng);
        store.value_mut(mlp.layers[0].w).assign(&array![[2.0]]);
        store.value_mut(mlp.layers[0].b).assign(&array![[1.0]]);
        assert_eq!(mlp.forward(&store, &array![[3.0]]).unwrap(), array![[7.0]]);

        let id = Mlp::new(&mut store, "id", &LayerSpec::new(vec![2, 2], Activation::Identity), &mut rng);
        store.value_mut(id.layers[0].w).assign(&array![[1.0, 0.0], [0.0, 1.0]]);
        store.value_mut(id.layers[0].b).fill(0.0);
        let x = array![[0.25, -4.0]];
        assert_eq!(id.forward(&store, &x).unwrap(), x);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &LayerSpec::new(vec![3, 2], Activation::Tanh), &mut rng);
        assert!(matches!(
            mlp.forward(&store, &array![[1.0, 2.0]]),
            Err(Error::SizeMismatch { .. })
        ));
    }

    #[test]
    fn output_activations_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let x = array![[10.0, -3.0, 0.5], [0.0, 0.0, 0.0]];
        for act in [Activation::Sigmoid, Activation::Softmax, Activation::Tanh] {
            let mlp = Mlp::new(&mut store, "m", &LayerSpec::new(vec![3, 5, 4], act), &mut rng);
            let y = mlp.forward(&store, &x).unwrap();
            for row in y.rows() {
                match act {
                    Activation::Softmax => assert!((row.sum() - 1.0).abs() < 1e-12),
                    Activation::Sigmoid => assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v))),
                    _ => assert!(row.iter().all(|&v| v.abs() <= 1.0)),
                }
            }
        }
    }
}
