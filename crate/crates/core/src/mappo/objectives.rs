//! Clipped surrogate, value regression and the per-path loss passes used by
//! both the update step and the gradient checker.

use ndarray::{Array2, Axis};

use crate::consmac::{ExecutionCache, ExecutionNet};
use crate::error::{Error, Result};
use crate::nn::{gaussian_entropy, gaussian_logprob, Mlp, MlpCache, ParamStore};

fn clipped_term(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// Mean over samples of `min(beta*A, clip(beta, 1-eps, 1+eps)*A)` with
/// `beta = exp(logp_new - logp_old)`. Advantages are used as given.
pub fn ppo_policy_objective(logp_new: &[f64], logp_old: &[f64], advantages: &[f64], clip: f64) -> Result<f64> {
    check_len("old log-probs", logp_new.len(), logp_old.len())?;
    check_len("advantages", logp_new.len(), advantages.len())?;
    if logp_new.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logp_new
        .iter()
        .zip(logp_old)
        .zip(advantages)
        .map(|((n, o), a)| clipped_term((n - o).exp(), *a, clip))
        .sum();
    Ok(sum / logp_new.len() as f64)
}

/// Derivative of [`ppo_policy_objective`] w.r.t. each `logp_new`.
pub fn ppo_policy_objective_grad(logp_new: &[f64], logp_old: &[f64], advantages: &[f64], clip: f64) -> Vec<f64> {
    let n = logp_new.len().max(1) as f64;
    logp_new
        .iter()
        .zip(logp_old)
        .zip(advantages)
        .map(|((new, old), &a)| {
            let r = (new - old).exp();
            let unclipped = (a >= 0.0 && r < 1.0 + clip) || (a < 0.0 && r > 1.0 - clip);
            if unclipped {
                r * a / n
            } else {
                0.0
            }
        })
        .collect()
}

/// `-mean((V_new - (A + V_old))^2)`.
pub fn value_objective(v_new: &[f64], advantages: &[f64], v_old: &[f64]) -> Result<f64> {
    check_len("advantages", v_new.len(), advantages.len())?;
    check_len("old values", v_new.len(), v_old.len())?;
    let targets: Vec<f64> = advantages.iter().zip(v_old).map(|(a, v)| a + v).collect();
    Ok(-mean_squared_error(v_new, &targets))
}

fn mean_squared_error(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::SizeMismatch { what, expected, got });
    }
    Ok(())
}

/// Inputs to the policy loss: everything recorded at rollout time plus the
/// (normalized) advantages.
#[derive(Debug, Clone, Copy)]
pub struct PolicyBatch<'a> {
    pub obs: &'a Array2<f64>,
    /// Consensus vectors, treated as constants.
    pub h: &'a Array2<f64>,
    pub raw_actions: &'a Array2<f64>,
    pub logp_old: &'a [f64],
    pub advantages: &'a [f64],
    pub sigma: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub communicate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyLossStats {
    /// `-(J_clip + alpha * H)`, the minimized quantity.
    pub loss: f64,
    pub surrogate: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// `max |beta - 1|` over the batch.
    pub max_ratio_deviation: f64,
    pub approx_kl: f64,
}

/// Forward pass of the policy loss. Returns the execution cache and
/// `d loss / d mu` for [`ExecutionNet::backward`].
pub fn policy_loss(pe: &ExecutionNet, batch: &PolicyBatch) -> Result<(PolicyLossStats, ExecutionCache, Array2<f64>)> {
    let n = batch.obs.nrows();
    check_len("raw actions", n, batch.raw_actions.nrows())?;
    check_len("old log-probs", n, batch.logp_old.len())?;
    check_len("advantages", n, batch.advantages.len())?;
    let (out, cache) = pe.forward(batch.obs, batch.h, batch.communicate)?;
    let logp_new: Vec<f64> = out
        .mu
        .axis_iter(Axis(0))
        .zip(batch.raw_actions.axis_iter(Axis(0)))
        .map(|(mu, u)| gaussian_logprob(mu, batch.sigma, u))
        .collect();
    let surrogate = ppo_policy_objective(&logp_new, batch.logp_old, batch.advantages, batch.clip)?;
    let dlogp = ppo_policy_objective_grad(&logp_new, batch.logp_old, batch.advantages, batch.clip);
    let entropy = gaussian_entropy(batch.sigma, 2);

    let inv_var = 1.0 / (batch.sigma * batch.sigma);
    let mut d_mu = Array2::zeros(out.mu.raw_dim());
    for (r, g) in dlogp.iter().enumerate() {
        for c in 0..2 {
            // loss = -surrogate, d logp / d mu = (u - mu) / sigma^2
            d_mu[[r, c]] = -g * (batch.raw_actions[[r, c]] - out.mu[[r, c]]) * inv_var;
        }
    }

    let mut clipped = 0usize;
    let mut max_dev = 0.0f64;
    let mut kl = 0.0;
    for (new, old) in logp_new.iter().zip(batch.logp_old) {
        let r = (new - old).exp();
        if (r - 1.0).abs() > batch.clip {
            clipped += 1;
        }
        max_dev = max_dev.max((r - 1.0).abs());
        kl += old - new;
    }
    let stats = PolicyLossStats {
        loss: -(surrogate + batch.entropy_coef * entropy),
        surrogate,
        entropy,
        clip_fraction: clipped as f64 / n.max(1) as f64,
        max_ratio_deviation: max_dev,
        approx_kl: kl / n.max(1) as f64,
    };
    Ok((stats, cache, d_mu))
}

/// Mean squared error of the critic's (normalized) output against
/// (normalized) targets. Returns the loss, the cache and `d loss / d V`.
pub fn value_loss(critic: &Mlp, store: &ParamStore, inputs: &Array2<f64>, targets: &[f64]) -> Result<(f64, MlpCache, Array2<f64>)> {
    check_len("value targets", inputs.nrows(), targets.len())?;
    let cache = critic.forward_cached(store, inputs)?;
    let pred: Vec<f64> = cache.output.column(0).to_vec();
    let loss = mean_squared_error(&pred, targets);
    let n = targets.len().max(1) as f64;
    let d = Array2::from_shape_fn((targets.len(), 1), |(r, _)| 2.0 * (pred[r] - targets[r]) / n);
    Ok((loss, cache, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_ratio_gives_mean_advantage() {
        let lp = [0.3, -1.0, 2.0];
        let adv = [1.0, -2.0, 0.5];
        let j = ppo_policy_objective(&lp, &lp, &adv, 0.2).unwrap();
        assert!((j - (-0.5 / 3.0)).abs() < 1e-15);
        let mut normed = adv.to_vec();
        super::super::gae::normalize_advantages(&mut normed);
        assert!(ppo_policy_objective(&lp, &lp, &normed, 0.2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn clip_arithmetic() {
        let up = 1.5f64.ln();
        assert!((ppo_policy_objective(&[up], &[0.0], &[1.0], 0.2).unwrap() - 1.2).abs() < 1e-12);
        let down = 0.5f64.ln();
        assert!((ppo_policy_objective(&[down], &[0.0], &[-1.0], 0.2).unwrap() + 0.8).abs() < 1e-12);
        // clipped samples carry no gradient
        assert_eq!(ppo_policy_objective_grad(&[up], &[0.0], &[1.0], 0.2), vec![0.0]);
        assert_eq!(ppo_policy_objective_grad(&[down], &[0.0], &[-1.0], 0.2), vec![0.0]);
        assert!((ppo_policy_objective_grad(&[up], &[0.0], &[-1.0], 0.2)[0] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn value_objective_examples() {
        let adv = [0.5, -1.0];
        let old = [1.0, 2.0];
        let exact = [1.5, 1.0];
        assert_eq!(value_objective(&exact, &adv, &old).unwrap(), 0.0);
        let off = [2.5, 0.0];
        assert!((value_objective(&off, &adv, &old).unwrap() + 1.0).abs() < 1e-15);
        assert!(value_objective(&[1.0], &adv, &old).is_err());
    }
}

#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::consmac::{ConsMacPolicy, NetConfig};
    use crate::nn::{finite_diff_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn policy_loss_gradient_matches_finite_differences() {
        let net = NetConfig {
            message_width: 6,
            hidden_width: 5,
            heads: 2,
        };
        let mut policy = ConsMacPolicy::new(&net, 0.5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 7;
        let obs = Array2::from_shape_fn((n, 32), |_| rng.random_range(-3.0..3.0));
        let h = Array2::from_shape_fn((n, 6), |_| rng.random_range(-1.0..1.0));
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
        let report = finite_diff_check(
            "policy",
            &mut policy.pe,
            |pe| vec![&mut pe.store],
            |pe| policy_loss(pe, &batch).unwrap().0.loss,
            |pe| {
                let (_, cache, d) = policy_loss(pe, &batch).unwrap();
                pe.backward(&cache, &d);
            },
            &GradCheckOptions::default(),
        );
        assert!(report.passed(), "{report}");
    }
}
