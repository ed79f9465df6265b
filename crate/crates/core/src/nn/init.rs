use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Semi-orthogonal `rows x cols` matrix scaled by `gain`: orthonormal columns
/// when `rows >= cols`, orthonormal rows otherwise.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut q = Array2::<f64>::zeros((long, short));
    for v in q.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    // modified Gram-Schmidt over columns
    for j in 0..short {
        for k in 0..j {
            let dot: f64 = (0..long).map(|i| q[[i, j]] * q[[i, k]]).sum();
            for i in 0..long {
                q[[i, j]] -= dot * q[[i, k]];
            }
        }
        let norm: f64 = (0..long).map(|i| q[[i, j]] * q[[i, j]]).sum::<f64>().sqrt();
        let norm = if norm > 1e-12 { norm } else { 1.0 };
        for i in 0..long {
            q[[i, j]] /= norm;
        }
    }
    q.mapv_inplace(|v| v * gain);
    if rows >= cols {
        q
    } else {
        q.reversed_axes().as_standard_layout().to_owned()
    }
}
