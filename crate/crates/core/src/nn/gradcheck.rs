//! Central-difference verification of analytic gradients.

use std::fmt;

use super::store::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Step is `rel_step * max(1, |theta|)`.
    pub rel_step: f64,
    pub tolerance: f64,
    /// Entries probed per parameter block (evenly strided).
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rel_step: 1e-5,
            tolerance: 1e-4,
            max_entries: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub checked: usize,
    /// max |analytic - numeric| over probed entries, divided by the largest
    /// magnitude of either gradient in the block.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.max_rel_error.is_finite() && b.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(
            f,
            "[{verdict}] {} (max rel error {:.3e}, tolerance {:.0e})",
            self.label,
            self.max_error(),
            self.tolerance
        )?;
        for b in &self.blocks {
            writeln!(f, "    {:<28} {:>4} entries  {:.3e}", b.name, b.checked, b.max_rel_error)?;
        }
        Ok(())
    }
}

fn probe_indices(len: usize, max_entries: usize) -> Vec<usize> {
    if len <= max_entries {
        return (0..len).collect();
    }
    let stride = len as f64 / max_entries as f64;
    (0..max_entries).map(|k| (k as f64 * stride) as usize).collect()
}

/// Compares the gradients written by `analytic` against central differences
/// of `loss`, for every parameter in the stores returned by `stores`.
///
/// `analytic` is called once on zeroed gradients and must accumulate
/// d(loss)/d(theta) into the stores.
pub fn finite_diff_check<M>(
    label: &str,
    model: &mut M,
    stores: impl Fn(&mut M) -> Vec<&mut ParamStore>,
    mut loss: impl FnMut(&M) -> f64,
    mut analytic: impl FnMut(&mut M),
    opts: &GradCheckOptions,
) -> GradCheckReport {
    for s in stores(model) {
        s.zero_grad();
    }
    analytic(model);
    let grads: Vec<Vec<(String, Vec<f64>)>> = stores(model)
        .into_iter()
        .map(|s| {
            s.params()
                .iter()
                .map(|p| (p.name.clone(), p.grad.iter().copied().collect()))
                .collect()
        })
        .collect();
    for s in stores(model) {
        s.zero_grad();
    }

    let mut blocks = Vec::new();
    for (si, store_grads) in grads.iter().enumerate() {
        for (pi, (name, analytic_grad)) in store_grads.iter().enumerate() {
            let idx = probe_indices(analytic_grad.len(), opts.max_entries);
            let mut numeric = Vec::with_capacity(idx.len());
            for &e in &idx {
                let orig = stores(model)[si].params()[pi].value.as_slice().expect("contiguous")[e];
                let h = opts.rel_step * orig.abs().max(1.0);
                let mut eval = |m: &mut M, v: f64| {
                    stores(m)[si].params_mut()[pi]
                        .value
                        .as_slice_mut()
                        .expect("contiguous")[e] = v;
                    loss(m)
                };
                let plus = eval(model, orig + h);
                let minus = eval(model, orig - h);
                stores(model)[si].params_mut()[pi]
                    .value
                    .as_slice_mut()
                    .expect("contiguous")[e] = orig;
                numeric.push((plus - minus) / (2.0 * h));
            }
            let mut scale = 0.0f64;
            let mut diff = 0.0f64;
            for (&e, &n) in idx.iter().zip(&numeric) {
                let a = analytic_grad[e];
                scale = scale.max(a.abs()).max(n.abs());
                diff = diff.max((a - n).abs());
            }
            let max_rel_error = if scale < 1e-10 { diff } else { diff / scale };
            blocks.push(BlockError {
                name: name.clone(),
                checked: idx.len(),
                max_rel_error,
            });
        }
    }
    GradCheckReport {
        label: label.to_string(),
        tolerance: opts.tolerance,
        blocks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct Quadratic {
        store: ParamStore,
        corrupt: bool,
    }

    // f(w) = sum_i (i+1) * w_i^2 + w_0 * w_1
    fn loss(q: &Quadratic) -> f64 {
        let w = q.store.params()[0].value.as_slice().unwrap();
        w.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v * v).sum::<f64>() + w[0] * w[1]
    }

    fn grad(q: &mut Quadratic) {
        let w = q.store.params()[0].value.as_slice().unwrap().to_vec();
        let g = q.store.params_mut()[0].grad.as_slice_mut().unwrap();
        for i in 0..w.len() {
            g[i] += 2.0 * (i + 1) as f64 * w[i];
        }
        g[0] += w[1];
        g[1] += w[0];
        if q.corrupt {
            g[2] *= 1.5;
        }
    }

    fn model(corrupt: bool) -> Quadratic {
        let mut store = ParamStore::new();
        store.add("w", array![[0.7, -1.3, 2.1]]);
        Quadratic { store, corrupt }
    }

    #[test]
    fn quadratic_passes_tightly() {
        let mut q = model(false);
        let r = finite_diff_check("quad", &mut q, |m| vec![&mut m.store], loss, grad, &GradCheckOptions::default());
        assert!(r.max_error() < 1e-6, "{r}");
        assert!(r.passed());
        assert_eq!(r.blocks[0].checked, 3);
        // parameters restored
        assert_eq!(q.store.params()[0].value, array![[0.7, -1.3, 2.1]]);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let mut q = model(true);
        let r = finite_diff_check("quad", &mut q, |m| vec![&mut m.store], loss, grad, &GradCheckOptions::default());
        assert!(!r.passed());
        assert!(r.max_error() > 1e-4);
    }
}
