//! Central-difference checks of every analytic gradient path used in
//! training: the PPO policy loss, the critic loss, the consensus loss and the
//! distillation loss.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consmac::{ce_loss, ce_loss_with_grad, ConsMacPolicy, LocalBatch, LocalBatchBuilder, NetConfig};
use crate::distill::distill_pass;
use crate::error::Result;
use crate::mappo::{critic_input_width, policy_loss, value_loss, Critic, PolicyBatch};
use crate::nn::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Scales the first analytic gradient block by 1.25 after backward, so
    /// every check must fail.
    pub inject_bug: bool,
    pub check: GradCheckOptions,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            inject_bug: false,
            check: GradCheckOptions::default(),
        }
    }
}

fn tiny_net() -> NetConfig {
    NetConfig {
        message_width: 6,
        hidden_width: 5,
        heads: 2,
    }
}

/// Random local batch with 0..=7 neighbors per sample.
pub fn random_batch<R: Rng + ?Sized>(rng: &mut R, width: usize, samples: usize) -> Result<LocalBatch> {
    let mut b = LocalBatchBuilder::new(width);
    for k in 0..samples {
        let obs: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
        let own: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = if k == 0 { 0 } else { rng.random_range(1..=7) };
        let msgs: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let dists: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..3.0)).collect();
        b.push(&obs, &own, msgs.iter().map(|v| v.as_slice()), dists)?;
    }
    Ok(b.finish())
}

fn maybe_corrupt(stores: Vec<&mut ParamStore>, inject: bool) {
    if inject {
        if let Some(p) = stores.into_iter().next().and_then(|s| s.params_mut().first_mut()) {
            p.grad.mapv_inplace(|g| 1.25 * g);
        }
    }
}

pub fn check_policy(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let net = tiny_net();
    let mut policy = ConsMacPolicy::new(&net, 0.5, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let n = 7;
    let obs = Array2::from_shape_fn((n, 32), |_| rng.random_range(-3.0..3.0));
    let h = Array2::from_shape_fn((n, net.message_width), |_| rng.random_range(-1.0..1.0));
    let raw = Array2::from_shape_fn((n, 2), |_| rng.random_range(-0.6..0.6));
    let logp_old: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
    let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let batch = PolicyBatch {
        obs: &obs,
        h: &h,
        raw_actions: &raw,
        logp_old: &logp_old,
        advantages: &adv,
        sigma: 0.3,
        clip: 0.2,
        entropy_coef: 0.01,
        communicate: true,
    };
    Ok(finite_diff_check(
        "policy (clipped surrogate + entropy)",
        &mut policy.pe,
        |pe| vec![&mut pe.store],
        |pe| policy_loss(pe, &batch).map(|r| r.0.loss).unwrap_or(f64::NAN),
        |pe| {
            if let Ok((_, cache, d)) = policy_loss(pe, &batch) {
                pe.backward(&cache, &d);
            }
            maybe_corrupt(vec![&mut pe.store], opts.inject_bug);
        },
        &opts.check,
    ))
}

pub fn check_value(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let net = tiny_net();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let width = critic_input_width(&net);
    let mut critic = Critic::new(width, net.hidden_width, &mut rng);
    let n = 9;
    let inputs = Array2::from_shape_fn((n, width), |_| rng.random_range(-3.0..3.0));
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Ok(finite_diff_check(
        "value (critic mse)",
        &mut critic,
        |c| vec![&mut c.store],
        |c| value_loss(&c.net, &c.store, &inputs, &targets).map(|r| r.0).unwrap_or(f64::NAN),
        |c| {
            if let Ok((_, cache, d)) = value_loss(&c.net, &c.store, &inputs, &targets) {
                c.net.backward(&mut c.store, &cache, &d, false);
            }
            maybe_corrupt(vec![&mut c.store], opts.inject_bug);
        },
        &opts.check,
    ))
}

pub fn check_consensus(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let net = tiny_net();
    let mut policy = ConsMacPolicy::new(&net, 0.5, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let batch = random_batch(&mut rng, net.message_width, 6)?;
    let global = Array2::from_shape_fn((batch.len(), 32), |_| rng.random_range(-3.0..3.0));
    Ok(finite_diff_check(
        "consensus (global-estimate cross-entropy)",
        &mut policy.ce,
        |ce| vec![&mut ce.store],
        |ce| {
            ce.forward(&batch)
                .and_then(|(out, _)| ce_loss(&out.e_hat, &global))
                .unwrap_or(f64::NAN)
        },
        |ce| {
            if let Ok((out, cache)) = ce.forward(&batch) {
                if let Ok((_, d)) = ce_loss_with_grad(&out.e_hat, &global) {
                    ce.backward(&cache, None, Some(&d));
                }
            }
            maybe_corrupt(vec![&mut ce.store], opts.inject_bug);
        },
        &opts.check,
    ))
}

pub fn check_distill(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let net = tiny_net();
    let mut student = ConsMacPolicy::new(&net, 0.5, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4));
    let batch = random_batch(&mut rng, net.message_width, 6)?;
    let u = Array2::from_shape_fn((batch.len(), 2), |_| rng.random_range(-0.5..0.5));
    let h = Array2::from_shape_fn((batch.len(), net.message_width), |_| rng.random_range(-1.0..1.0));
    Ok(finite_diff_check(
        "distillation (action + consensus mse)",
        &mut student,
        |s| vec![&mut s.ce.store, &mut s.pe.store],
        |s| {
            let mut s = s.clone();
            distill_pass(&mut s, &batch, &u, &h, false)
                .map(|e| e.total())
                .unwrap_or(f64::NAN)
        },
        |s| {
            let _ = distill_pass(s, &batch, &u, &h, true);
            maybe_corrupt(vec![&mut s.ce.store], opts.inject_bug);
        },
        &opts.check,
    ))
}

/// All four checks, in a fixed order.
pub fn gradient_suite(opts: &SuiteOptions) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_policy(opts)?,
        check_value(opts)?,
        check_consensus(opts)?,
        check_distill(opts)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_catches_injected_bug() {
        let reports = gradient_suite(&SuiteOptions::default()).unwrap();
        for r in &reports {
            assert!(r.passed(), "{r}");
        }
        let broken = gradient_suite(&SuiteOptions {
            inject_bug: true,
            ..SuiteOptions::default()
        })
        .unwrap();
        for r in &broken {
            assert!(!r.passed(), "{r}");
        }
    }
}
