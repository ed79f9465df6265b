use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis};

use crate::error::{Error, Result};

/// In-place, max-shifted softmax of one vector.
pub fn softmax_inplace(mut x: ArrayViewMut1<f64>) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = ndarray::Array1::from(x.to_vec());
    softmax_inplace(out.view_mut());
    out.to_vec()
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for row in out.axis_iter_mut(Axis(0)) {
        softmax_inplace(row);
    }
    out
}

/// Backward of a row-wise softmax given its output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.raw_dim());
    for ((yr, dyr), mut dxr) in y
        .axis_iter(Axis(0))
        .zip(dy.axis_iter(Axis(0)))
        .zip(dx.axis_iter_mut(Axis(0)))
    {
        let dot: f64 = yr.iter().zip(dyr.iter()).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr.iter()).zip(dyr.iter()) {
            *d = yv * (g - dot);
        }
    }
    dx
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Log-density of `u` under a diagonal Gaussian with shared standard deviation
/// `sigma`, and the distribution's entropy.
pub fn gaussian_logprob_entropy(mu: ArrayView1<f64>, sigma: f64, u: ArrayView1<f64>) -> Result<(f64, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidValue {
            what: "sigma",
            value: sigma,
        });
    }
    if mu.len() != u.len() {
        return Err(Error::SizeMismatch {
            what: "gaussian dims",
            expected: mu.len(),
            got: u.len(),
        });
    }
    Ok((gaussian_logprob(mu, sigma, u), gaussian_entropy(sigma, mu.len())))
}

pub fn gaussian_logprob(mu: ArrayView1<f64>, sigma: f64, u: ArrayView1<f64>) -> f64 {
    let var = sigma * sigma;
    mu.iter()
        .zip(u.iter())
        .map(|(m, x)| -(x - m) * (x - m) / (2.0 * var) - sigma.ln() - 0.5 * LN_2PI)
        .sum()
}

pub fn gaussian_entropy(sigma: f64, dims: usize) -> f64 {
    dims as f64 * 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln()
}
