//! Centralized training with decentralized execution: rollouts, GAE, the
//! clipped PPO update on the execution parameters and critic, and the
//! consensus (KL) update on the CE parameters.
//!
//! The three parameter groups (execution, consensus, critic) live in separate
//! stores with separate Adam states; the PPO pass consumes the recorded `h`
//! as a constant, so no policy gradient ever reaches the consensus store.

pub mod buffer;
pub mod critic;
pub mod gae;
pub mod objectives;
pub mod trainer;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{collect_rollout, RolloutBuffer};
pub use critic::{critic_input, critic_input_width, Critic, ValueNorm, LAG_FEATURES};
pub use gae::{gae, normalize_advantages, returns};
pub use objectives::{
    policy_loss, ppo_policy_objective, ppo_policy_objective_grad, value_loss, value_objective, PolicyBatch,
    PolicyLossStats,
};
pub use trainer::{train_teacher, update_step, EpisodeMetrics, TrainOutcome, UpdateReport, UpdateScope};

use crate::consmac::{CommMode, ConsMacPolicy, NetConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub episodes: usize,
    pub seed: u64,
    pub mode: CommMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            epochs: 10,
            lr: 1e-4,
            max_grad_norm: 10.0,
            episodes: 350,
            seed: 1,
            mode: CommMode::ConsMac,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} = {v} is out of range")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", self.gamma);
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", self.lambda);
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip", self.clip);
        }
        if !(self.lr > 0.0) {
            return bad("lr", self.lr);
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm", self.max_grad_norm);
        }
        if self.epochs == 0 || self.episodes == 0 {
            return Err(Error::Config("epochs and episodes must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a per-size teacher learns: the shared agent policy, the
/// centralized critic and its return statistics.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub policy: ConsMacPolicy,
    pub critic: Critic,
    pub value_norm: ValueNorm,
}

impl TeacherModel {
    pub fn new(net: &NetConfig, action_scale: f64, seed: u64) -> Result<Self> {
        let policy = ConsMacPolicy::new(net, action_scale, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c417_1c00_0000);
        let critic = Critic::new(critic_input_width(net), net.hidden_width, &mut rng);
        Ok(Self {
            policy,
            critic,
            value_norm: ValueNorm::default(),
        })
    }

    /// Critic values in return units, one per row of [`critic_input`]s.
    pub fn values(&self, inputs: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self
            .critic
            .forward(inputs)?
            .into_iter()
            .map(|v| self.value_norm.denormalize(v))
            .collect())
    }
}
