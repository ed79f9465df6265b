//! The per-episode update and the teacher training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{collect_rollout, gae, normalize_advantages, policy_loss, value_loss, PolicyBatch, RolloutBuffer, TeacherModel, TrainConfig};
use crate::consmac::{ce_loss_with_grad, sigma_schedule, NetConfig};
use crate::env::{EnvConfig, SwarmEnv};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, ParamStore};

/// Which parameter groups an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateScope {
    pub policy: bool,
    pub value: bool,
    pub consensus: bool,
}

impl UpdateScope {
    pub const ALL: Self = Self {
        policy: true,
        value: true,
        consensus: true,
    };
    pub const PPO_ONLY: Self = Self {
        policy: true,
        value: true,
        consensus: false,
    };
    pub const CONSENSUS_ONLY: Self = Self {
        policy: false,
        value: false,
        consensus: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub ce_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// `max |beta - 1|` on the first epoch (zero for an untouched snapshot).
    pub first_epoch_ratio_deviation: f64,
    pub policy_grad_norm: f64,
    pub value_grad_norm: f64,
    pub ce_grad_norm: f64,
}

fn diverged(what: &'static str, episode: usize, detail: String) -> Error {
    Error::Diverged { what, episode, detail }
}

fn apply(store: &mut ParamStore, adam: &AdamConfig, max_norm: f64) -> f64 {
    let norm = store.clip_grad_norm(max_norm);
    store.adam_step(adam);
    norm
}

/// Runs `cfg.epochs` full-batch passes over the buffer. `episode` is only used
/// in divergence diagnostics.
pub fn update_step(
    buffer: &RolloutBuffer,
    model: &mut TeacherModel,
    cfg: &TrainConfig,
    scope: UpdateScope,
    episode: usize,
) -> Result<UpdateReport> {
    let adam = AdamConfig::with_lr(cfg.lr);
    let step_adv = gae(&buffer.rewards, &buffer.values, buffer.bootstrap_value, cfg.gamma, cfg.lambda)?;
    let targets: Vec<f64> = step_adv.iter().zip(&buffer.values).map(|(a, v)| a + v).collect();
    if scope.value {
        model.value_norm.update(&targets);
    }
    let norm_targets: Vec<f64> = targets.iter().map(|&t| model.value_norm.normalize(t)).collect();
    let mut adv: Vec<f64> = buffer.step_of_row.iter().map(|&t| step_adv[t]).collect();
    normalize_advantages(&mut adv);
    let row_global = scope.consensus.then(|| buffer.global_obs_per_row());

    let mut report = UpdateReport::default();
    for epoch in 0..cfg.epochs {
        if scope.policy {
            let batch = PolicyBatch {
                obs: &buffer.inputs.obs,
                h: &buffer.h,
                raw_actions: &buffer.raw_actions,
                logp_old: &buffer.log_probs,
                advantages: &adv,
                sigma: buffer.sigma,
                clip: cfg.clip,
                entropy_coef: cfg.entropy_coef,
                communicate: cfg.mode.communicates(),
            };
            let pe = &mut model.policy.pe;
            let (stats, cache, d_mu) = policy_loss(pe, &batch)?;
            if !stats.loss.is_finite() {
                return Err(diverged("policy loss", episode, format!("{stats:?}")));
            }
            if epoch == 0 {
                report.first_epoch_ratio_deviation = stats.max_ratio_deviation;
            }
            pe.store.zero_grad();
            // d/dh is discarded: h is a constant for this loss
            let _ = pe.backward(&cache, &d_mu);
            report.policy_grad_norm = apply(&mut pe.store, &adam, cfg.max_grad_norm);
            report.policy_loss = stats.loss;
            report.entropy = stats.entropy;
            report.clip_fraction = stats.clip_fraction;
            report.approx_kl = stats.approx_kl;
        }
        if scope.value {
            let critic = &mut model.critic;
            let (loss, cache, d) = value_loss(&critic.net, &critic.store, &buffer.critic_inputs, &norm_targets)?;
            if !loss.is_finite() {
                return Err(diverged("value loss", episode, format!("loss {loss}")));
            }
            critic.store.zero_grad();
            critic.net.backward(&mut critic.store, &cache, &d, false);
            report.value_grad_norm = apply(&mut critic.store, &adam, cfg.max_grad_norm);
            report.value_loss = loss;
        }
        if let Some(global) = &row_global {
            let ce = &mut model.policy.ce;
            let (out, cache) = ce.forward(&buffer.inputs)?;
            let (loss, d_e) = ce_loss_with_grad(&out.e_hat, global)?;
            if !loss.is_finite() {
                return Err(diverged("consensus loss", episode, format!("loss {loss}")));
            }
            ce.store.zero_grad();
            ce.backward(&cache, None, Some(&d_e));
            report.ce_grad_norm = apply(&mut ce.store, &adam, cfg.max_grad_norm);
            report.ce_loss = loss;
        }
    }
    for (what, store) in [
        ("execution parameters", &model.policy.pe.store),
        ("consensus parameters", &model.policy.ce.store),
        ("critic parameters", &model.critic.store),
    ] {
        if !store.all_finite() {
            return Err(diverged(what, episode, "non-finite value after Adam step".into()));
        }
    }
    Ok(report)
}

/// One row of the per-episode metrics file.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub mean_reward: f64,
    pub r_f: f64,
    pub r_v: f64,
    pub r_c: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub ce_loss: f64,
    pub entropy: f64,
    pub sigma: f64,
    pub initial_distance: f64,
    pub final_distance: f64,
    pub max_abs_message: f64,
}

impl EpisodeMetrics {
    pub const CSV_HEADER: &'static str = "episode,mean_reward,r_f,r_v,r_c,policy_loss,value_loss,ce_loss,entropy,sigma,initial_hd,final_hd,max_abs_message";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.episode,
            self.mean_reward,
            self.r_f,
            self.r_v,
            self.r_c,
            self.policy_loss,
            self.value_loss,
            self.ce_loss,
            self.entropy,
            self.sigma,
            self.initial_distance,
            self.final_distance,
            self.max_abs_message
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TeacherModel,
    pub metrics: Vec<EpisodeMetrics>,
}

/// Trains one teacher for `env.n_active` agents. `on_episode` sees each
/// metrics row as it is produced.
pub fn train_teacher(
    env_cfg: &EnvConfig,
    net: &NetConfig,
    cfg: &TrainConfig,
    mut on_episode: impl FnMut(&EpisodeMetrics),
) -> Result<TrainOutcome> {
    env_cfg.validate()?;
    cfg.validate()?;
    let mut model = TeacherModel::new(net, env_cfg.u_range, cfg.seed)?;
    let mut env = SwarmEnv::new(env_cfg.clone(), net.message_width, cfg.seed)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7eac_0000));
    let scope = UpdateScope {
        consensus: cfg.mode.trains_consensus(),
        ..UpdateScope::PPO_ONLY
    };
    let mut metrics = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let sigma = sigma_schedule(episode, cfg.episodes);
        let (env_seed, action_seed): (u64, u64) = (seeds.random(), seeds.random());
        let snapshot = model.clone();
        let buffer = collect_rollout(&mut env, &snapshot, cfg.mode, sigma, env_seed, action_seed)?;
        let report = update_step(&buffer, &mut model, cfg, scope, episode)?;
        let c = buffer.mean_components();
        let row = EpisodeMetrics {
            episode,
            mean_reward: buffer.mean_reward(),
            r_f: c.r_f,
            r_v: c.r_v,
            r_c: c.r_c,
            policy_loss: report.policy_loss,
            value_loss: report.value_loss,
            ce_loss: report.ce_loss,
            entropy: report.entropy,
            sigma,
            initial_distance: buffer.initial_distance,
            final_distance: buffer.final_distance,
            max_abs_message: buffer.max_abs_message,
        };
        if !row.mean_reward.is_finite() {
            return Err(diverged("episode reward", episode, format!("{row:?}")));
        }
        on_episode(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome { model, metrics })
}

/// Greedy (u = mu) rollouts used for evaluation; returns
/// `(initial, final)` formation distances per episode.
pub fn greedy_distances(env_cfg: &EnvConfig, model: &TeacherModel, mode: crate::consmac::CommMode, seeds: &[u64]) -> Result<Vec<(f64, f64)>> {
    let mut env = SwarmEnv::new(env_cfg.clone(), model.policy.net.message_width, 0)?;
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        env.reset(seed)?;
        let start = env.formation_distance()?;
        while !env.done() {
            let states = env.local_states()?;
            let batch = crate::consmac::LocalBatch::from_local_states(&states, model.policy.net.message_width)?;
            let step = model.policy.act(&batch, mode)?;
            let actions: Vec<[f64; 2]> = step.execution.mu.rows().into_iter().map(|r| [r[0], r[1]]).collect();
            let messages = step.broadcast.rows().into_iter().map(|r| r.to_vec()).collect();
            env.step(&actions, messages)?;
        }
        out.push((start, env.formation_distance()?));
    }
    Ok(out)
}
