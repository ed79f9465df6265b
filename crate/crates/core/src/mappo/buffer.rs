//! On-policy rollout storage and collection.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{critic_input, TeacherModel};
use crate::consmac::{sample_action, CommMode, LocalBatch, LocalBatchBuilder};
use crate::env::{RewardComponents, SwarmEnv};
use crate::error::Result;

/// One episode of synchronized act/message/step transitions. Per-agent data
/// is stored row-wise (one row per active agent per step, agents in index
/// order); per-step data is indexed by `t`.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub inputs: LocalBatch,
    pub h: Array2<f64>,
    /// Pre-clamp Gaussian draws; log-probs refer to these.
    pub raw_actions: Array2<f64>,
    pub executed_actions: Vec<[f64; 2]>,
    pub log_probs: Vec<f64>,
    pub step_of_row: Vec<usize>,
    pub agent_of_row: Vec<usize>,
    pub global_obs: Array2<f64>,
    /// Per-step critic inputs (global observation plus reward lags).
    pub critic_inputs: Array2<f64>,
    pub rewards: Vec<f64>,
    pub components: Vec<RewardComponents>,
    /// `V_old(s^t)` in return units.
    pub values: Vec<f64>,
    pub bootstrap_value: f64,
    pub dones: Vec<bool>,
    pub sigma: f64,
    pub env_seed: u64,
    /// Largest |entry| of any broadcast message.
    pub max_abs_message: f64,
    pub initial_distance: f64,
    pub final_distance: f64,
}

impl RolloutBuffer {
    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    /// Global observation for every agent-step row.
    pub fn global_obs_per_row(&self) -> Array2<f64> {
        self.global_obs.select(Axis(0), &self.step_of_row)
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }

    pub fn mean_components(&self) -> RewardComponents {
        let n = self.components.len().max(1) as f64;
        let mut c = RewardComponents::default();
        for x in &self.components {
            c.r_f += x.r_f / n;
            c.r_v += x.r_v / n;
            c.r_c += x.r_c / n;
        }
        c
    }
}

/// Rolls out one full episode with the given (frozen) model. The environment
/// is reset with `env_seed`; exploration noise comes from `action_seed`.
pub fn collect_rollout(
    env: &mut SwarmEnv,
    model: &TeacherModel,
    mode: CommMode,
    sigma: f64,
    env_seed: u64,
    action_seed: u64,
) -> Result<RolloutBuffer> {
    let width = model.policy.net.message_width;
    env.reset(env_seed)?;
    let horizon = env.config().episode_length;
    let bound = env.config().u_range;
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);

    let mut builder = LocalBatchBuilder::new(width);
    let mut h = Vec::new();
    let mut raw = Vec::new();
    let mut executed_actions = Vec::new();
    let mut log_probs = Vec::new();
    let mut step_of_row = Vec::new();
    let mut agent_of_row = Vec::new();
    let mut global = Vec::new();
    let mut critic = Vec::new();
    let mut rewards = Vec::with_capacity(horizon);
    let mut components = Vec::with_capacity(horizon);
    let mut values = Vec::with_capacity(horizon);
    let mut dones = Vec::with_capacity(horizon);
    let mut max_abs_message = 0.0f64;
    let initial_distance = env.formation_distance()?;

    for t in 0..horizon {
        let states = env.local_states()?;
        let batch = LocalBatch::from_local_states(&states, width)?;
        let step = model.policy.act(&batch, mode)?;
        let ci = critic_input(env.state());
        values.push(model.values(&Array2::from_shape_vec((1, ci.len()), ci.clone()).expect("row"))?[0]);
        critic.extend_from_slice(&ci);
        global.extend(env.global_observation());

        let mut actions = Vec::with_capacity(states.len());
        for (k, s) in states.iter().enumerate() {
            let a = sample_action(step.execution.mu.row(k), sigma, bound, &mut rng)?;
            builder.push(
                &s.observation,
                &s.own_message,
                s.neighbor_messages.iter().map(|m| m.as_slice()),
                s.neighbors.iter().map(|n| n.distance),
            )?;
            h.extend(step.consensus.h.row(k).iter());
            raw.extend_from_slice(&a.raw);
            executed_actions.push(a.executed);
            log_probs.push(a.log_prob);
            step_of_row.push(t);
            agent_of_row.push(s.agent);
            actions.push(a.executed);
        }
        max_abs_message = step.broadcast.iter().fold(max_abs_message, |m, v| m.max(v.abs()));
        let messages = step.broadcast.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
        let res = env.step(&actions, messages)?;
        rewards.push(res.reward);
        components.push(res.components);
        dones.push(res.done);
    }
    let ci = critic_input(env.state());
    let bootstrap_value = model.values(&Array2::from_shape_vec((1, ci.len()), ci).expect("row"))?[0];
    let rows = log_probs.len();
    let obs_width = global.len() / horizon.max(1);
    Ok(RolloutBuffer {
        inputs: builder.finish(),
        h: Array2::from_shape_vec((rows, width), h).expect("h rows"),
        raw_actions: Array2::from_shape_vec((rows, 2), raw).expect("action rows"),
        executed_actions,
        log_probs,
        step_of_row,
        agent_of_row,
        global_obs: Array2::from_shape_vec((horizon, obs_width), global).expect("global rows"),
        critic_inputs: Array2::from_shape_vec((horizon, critic.len() / horizon.max(1)), critic).expect("critic rows"),
        rewards,
        components,
        values,
        bootstrap_value,
        dones,
        sigma,
        env_seed,
        max_abs_message,
        initial_distance,
        final_distance: env.formation_distance()?,
    })
}
