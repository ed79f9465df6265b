//! Generalized advantage estimation over a fixed horizon.

use crate::error::{Error, Result};

/// `A_t = sum_l (gamma*lambda)^l delta_{t+l}` with
/// `delta_t = r_t + gamma V_{t+1} - V_t` and `V_T = bootstrap`.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::SizeMismatch {
            what: "values per reward",
            expected: rewards.len(),
            got: values.len(),
        });
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut running = 0.0;
    let mut next_value = bootstrap;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    Ok(adv)
}

/// Advantage plus baseline: the regression target for the critic.
pub fn returns(advantages: &[f64], values: &[f64]) -> Vec<f64> {
    advantages.iter().zip(values).map(|(a, v)| a + v).collect()
}

/// Rescales to zero mean and unit variance (population variance). A constant
/// batch maps to zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / (std + 1e-8) } else { 0.0 };
    }
}
