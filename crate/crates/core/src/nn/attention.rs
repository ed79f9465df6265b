//! Multi-head scaled dot-product attention with a hand-derived backward pass.
//!
//! Queries and keys/values live in separate row matrices. Each query row
//! attends over its own contiguous span of key/value rows, which lets a batch
//! of variable-size neighborhoods share one packed key matrix.

use std::ops::Range;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::orthogonal;
use super::store::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_width: usize,
    pub head_width: usize,
    /// Scores are divided by `sqrt(scale)`.
    pub scale: f64,
}

impl AttentionConfig {
    /// Scale defaults to the per-head key width.
    pub fn new(heads: usize, model_width: usize) -> Result<Self> {
        if heads == 0 || !model_width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {model_width} not divisible by {heads} heads"
            )));
        }
        let head_width = model_width / heads;
        Ok(Self {
            heads,
            model_width,
            head_width,
            scale: head_width as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub config: AttentionConfig,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    queries: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    qp: Array2<f64>,
    kp: Array2<f64>,
    vp: Array2<f64>,
    spans: Vec<Range<usize>>,
    /// per query: heads x span weights, flattened
    weights: Vec<f64>,
    weight_offsets: Vec<usize>,
    ctx: Array2<f64>,
}

impl AttentionCache {
    /// Attention weights of `head` for query row `q`.
    pub fn weights(&self, q: usize, head: usize) -> &[f64] {
        let len = self.spans[q].len();
        let start = self.weight_offsets[q] + head * len;
        &self.weights[start..start + len]
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.model_width;
        Self {
            w_q: store.add(format!("{name}.w_q"), orthogonal(in_dim, d, 1.0, rng)),
            w_k: store.add(format!("{name}.w_k"), orthogonal(in_dim, d, 1.0, rng)),
            w_v: store.add(format!("{name}.w_v"), orthogonal(in_dim, d, 1.0, rng)),
            w_o: store.add(format!("{name}.w_o"), orthogonal(d, out_dim, 1.0, rng)),
            config,
            in_dim,
            out_dim,
        }
    }

    /// Every query row attends over all key rows.
    pub fn forward_dense(
        &self,
        store: &ParamStore,
        queries: &Array2<f64>,
        keys: &Array2<f64>,
        values: &Array2<f64>,
    ) -> Result<(Array2<f64>, AttentionCache)> {
        let spans = vec![0..keys.nrows(); queries.nrows()];
        self.forward(store, queries, keys, values, spans)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        queries: &Array2<f64>,
        keys: &Array2<f64>,
        values: &Array2<f64>,
        spans: Vec<Range<usize>>,
    ) -> Result<(Array2<f64>, AttentionCache)> {
        for (what, m) in [("query width", queries), ("key width", keys), ("value width", values)] {
            if m.ncols() != self.in_dim {
                return Err(Error::SizeMismatch {
                    what,
                    expected: self.in_dim,
                    got: m.ncols(),
                });
            }
        }
        if keys.nrows() != values.nrows() {
            return Err(Error::SizeMismatch {
                what: "key/value rows",
                expected: keys.nrows(),
                got: values.nrows(),
            });
        }
        if spans.len() != queries.nrows() {
            return Err(Error::SizeMismatch {
                what: "attention spans",
                expected: queries.nrows(),
                got: spans.len(),
            });
        }
        if let Some(bad) = spans.iter().find(|r| r.is_empty() || r.end > keys.nrows()) {
            return Err(Error::Config(format!("invalid key span {bad:?}")));
        }

        let cfg = &self.config;
        let (hw, inv_sqrt) = (cfg.head_width, 1.0 / cfg.scale.sqrt());
        let qp = queries.dot(store.value(self.w_q));
        let kp = keys.dot(store.value(self.w_k));
        let vp = values.dot(store.value(self.w_v));
        let mut ctx = Array2::<f64>::zeros((queries.nrows(), cfg.model_width));

        let mut weight_offsets = Vec::with_capacity(spans.len());
        let total: usize = spans.iter().map(|r| r.len() * cfg.heads).sum();
        let mut weights = Vec::with_capacity(total);
        let mut scores = Vec::new();
        for (q, span) in spans.iter().enumerate() {
            weight_offsets.push(weights.len());
            for h in 0..cfg.heads {
                let cols = h * hw..(h + 1) * hw;
                let qrow = qp.slice(s![q, cols.clone()]);
                scores.clear();
                for r in span.clone() {
                    let krow = kp.slice(s![r, cols.clone()]);
                    scores.push(qrow.dot(&krow) * inv_sqrt);
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in scores.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let mut out = ctx.slice_mut(s![q, cols.clone()]);
                for (a, r) in scores.iter().zip(span.clone()) {
                    let a = a / sum;
                    weights.push(a);
                    out.scaled_add(a, &vp.slice(s![r, cols.clone()]));
                }
            }
        }
        let out = ctx.dot(store.value(self.w_o));
        let cache = AttentionCache {
            queries: queries.clone(),
            keys: keys.clone(),
            values: values.clone(),
            qp,
            kp,
            vp,
            spans,
            weights,
            weight_offsets,
            ctx,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients and returns gradients w.r.t. the
    /// query, key and value inputs.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &AttentionCache,
        d_out: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let cfg = &self.config;
        let (hw, inv_sqrt) = (cfg.head_width, 1.0 / cfg.scale.sqrt());
        *store.grad_mut(self.w_o) += &cache.ctx.t().dot(d_out);
        let dctx = d_out.dot(&store.value(self.w_o).t());

        let mut dqp = Array2::<f64>::zeros(cache.qp.raw_dim());
        let mut dkp = Array2::<f64>::zeros(cache.kp.raw_dim());
        let mut dvp = Array2::<f64>::zeros(cache.vp.raw_dim());
        let mut da = Vec::new();
        for (q, span) in cache.spans.iter().enumerate() {
            for h in 0..cfg.heads {
                let cols = h * hw..(h + 1) * hw;
                let a = cache.weights(q, h);
                let g = dctx.slice(s![q, cols.clone()]);
                da.clear();
                for (&w, r) in a.iter().zip(span.clone()) {
                    dvp.slice_mut(s![r, cols.clone()]).scaled_add(w, &g);
                    da.push(g.dot(&cache.vp.slice(s![r, cols.clone()])));
                }
                let mean: f64 = a.iter().zip(&da).map(|(w, d)| w * d).sum();
                let qrow = cache.qp.slice(s![q, cols.clone()]).to_owned();
                for ((&w, &d), r) in a.iter().zip(&da).zip(span.clone()) {
                    let ds = w * (d - mean) * inv_sqrt;
                    dqp.slice_mut(s![q, cols.clone()])
                        .scaled_add(ds, &cache.kp.slice(s![r, cols.clone()]));
                    dkp.slice_mut(s![r, cols.clone()]).scaled_add(ds, &qrow);
                }
            }
        }
        *store.grad_mut(self.w_q) += &cache.queries.t().dot(&dqp);
        *store.grad_mut(self.w_k) += &cache.keys.t().dot(&dkp);
        *store.grad_mut(self.w_v) += &cache.values.t().dot(&dvp);
        let dq = dqp.dot(&store.value(self.w_q).t());
        let dk = dkp.dot(&store.value(self.w_k).t());
        let dv = dvp.dot(&store.value(self.w_v).t());
        (dq, dk, dv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(n: usize) -> Array2<f64> {
        Array2::eye(n)
    }

    fn setup(in_dim: usize, heads: usize, model: usize, out: usize) -> (ParamStore, MultiHeadAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(heads, model).unwrap();
        let att = MultiHeadAttention::new(&mut store, "att", in_dim, out, cfg, &mut rng);
        (store, att)
    }

    #[test]
    fn config_rejects_indivisible_width() {
        assert!(AttentionConfig::new(4, 10).is_err());
        let c = AttentionConfig::new(4, 16).unwrap();
        assert_eq!(c.head_width, 4);
        assert_eq!(c.scale, 4.0);
    }

    #[test]
    fn single_row_returns_value_projection() {
        let (store, att) = setup(4, 2, 4, 3);
        let x = array![[0.3, -1.0, 2.0, 0.5]];
        let (out, cache) = att.forward_dense(&store, &x, &x, &x).unwrap();
        let want = x.dot(store.value(att.w_v)).dot(store.value(att.w_o));
        assert_eq!(cache.weights(0, 0), &[1.0]);
        for (a, b) in out.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let (mut store, att) = setup(2, 2, 2, 2);
        for id in [att.w_q, att.w_k, att.w_v, att.w_o] {
            store.value_mut(id).assign(&identity(2));
        }
        let q = array![[1.0, 2.0]];
        let k = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let v = array![[1.0, 0.0], [0.0, 3.0], [2.0, 3.0]];
        let (out, cache) = att.forward_dense(&store, &q, &k, &v).unwrap();
        for h in 0..2 {
            for &w in cache.weights(0, h) {
                assert!((w - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert!((out[[0, 0]] - 1.0).abs() < 1e-14);
        assert!((out[[0, 1]] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn two_rows_match_hand_computation() {
        // one head of width 2, identity projections, scale 2
        let (mut store, att) = setup(2, 1, 2, 2);
        for id in [att.w_q, att.w_k, att.w_v, att.w_o] {
            store.value_mut(id).assign(&identity(2));
        }
        let e = array![[1.0, 0.0], [0.0, 2.0]];
        let (out, _) = att.forward_dense(&store, &e, &e, &e).unwrap();
        // row 0: scores [1, 0]/sqrt2 ; row 1: scores [0, 4]/sqrt2
        let r = 2f64.sqrt();
        let (a0, a1) = {
            let (x, y) = ((1.0 / r).exp(), 1.0f64);
            (x / (x + y), y / (x + y))
        };
        assert!((out[[0, 0]] - a0).abs() < 1e-14);
        assert!((out[[0, 1]] - 2.0 * a1).abs() < 1e-14);
        let (b0, b1) = {
            let (x, y) = (1.0f64, (4.0 / r).exp());
            (x / (x + y), y / (x + y))
        };
        assert!((out[[1, 0]] - b0).abs() < 1e-14);
        assert!((out[[1, 1]] - 2.0 * b1).abs() < 1e-14);
    }

    #[test]
    fn shape_errors() {
        let (store, att) = setup(4, 2, 4, 3);
        let x = Array2::zeros((2, 4));
        let bad = Array2::zeros((2, 3));
        assert!(att.forward_dense(&store, &bad, &x, &x).is_err());
        assert!(att.forward_dense(&store, &x, &x, &Array2::zeros((3, 4))).is_err());
    }
}
