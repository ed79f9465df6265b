//! The partially observable swarm world: point-mass agents in the plane,
//! radius-limited observation and message delivery, and the shared reward.

pub mod log;
pub mod reward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euclidean_distance, formation_template, FormationTemplate, Point2};
use crate::{N_MAX, N_MIN};

pub use reward::{
    collision_penalty, formation_distance, formation_reward, navigation_reward, ptp_formation_reward, total_reward,
    FormationMetric, RewardComponents, RewardWeights,
};

/// Values per observed agent slot: x, y, vx, vy.
pub const SLOT_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub n_active: usize,
    pub n_max: usize,
    pub delta_obs: f64,
    pub delta_safe: f64,
    pub destination: Point2,
    pub dt: f64,
    /// Per-axis acceleration bound (m/s^2).
    pub u_range: f64,
    /// Per-axis speed bound (m/s).
    pub v_max: f64,
    pub episode_length: usize,
    pub weights: RewardWeights,
    /// Initial positions are uniform in `[-init_box, init_box]^2`.
    pub init_box: f64,
    pub formation_metric: FormationMetric,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_active: 5,
            n_max: N_MAX,
            delta_obs: 3.0,
            delta_safe: 0.15,
            destination: Point2::new(0.0, 10.0),
            dt: 0.1,
            u_range: 0.5,
            v_max: 1.0,
            episode_length: 100,
            weights: RewardWeights::default(),
            init_box: 2.0,
            formation_metric: FormationMetric::Hd,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max != N_MAX {
            return Err(Error::Config(format!("n_max must be {N_MAX}, got {}", self.n_max)));
        }
        if !(N_MIN..=self.n_max).contains(&self.n_active) {
            return Err(Error::AgentCountOutOfRange {
                n: self.n_active,
                min: N_MIN,
                max: self.n_max,
            });
        }
        if !(self.delta_safe > 0.0 && self.delta_safe < self.delta_obs) {
            return Err(Error::Config(format!(
                "need 0 < delta_safe ({}) < delta_obs ({})",
                self.delta_safe, self.delta_obs
            )));
        }
        for (what, v) in [
            ("dt", self.dt),
            ("u_range", self.u_range),
            ("v_max", self.v_max),
            ("init_box", self.init_box),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidValue { what, value: v });
            }
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be positive".into()));
        }
        Ok(())
    }

    pub fn obs_width(&self) -> usize {
        SLOT_WIDTH * self.n_max
    }
}

/// Inactive agents carry all-zero position and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Point2,
    pub velocity: Point2,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub agents: Vec<AgentState>,
    /// Last broadcast message of each agent slot.
    pub outbox: Vec<Vec<f64>>,
    pub t: usize,
    pub prev_r_f: f64,
    pub prev_r_v: f64,
}

impl WorldState {
    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.agents.len()).filter(|&i| self.agents[i].active).collect()
    }

    pub fn n_active(&self) -> usize {
        self.agents.iter().filter(|a| a.active).count()
    }

    pub fn active_positions(&self) -> Vec<Point2> {
        self.agents.iter().filter(|a| a.active).map(|a| a.position).collect()
    }

    /// Zero-padded `(p, v)` of every agent slot, in index order.
    pub fn global_observation(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(SLOT_WIDTH * self.agents.len());
        for a in &self.agents {
            if a.active {
                out.extend_from_slice(&[a.position.x, a.position.y, a.velocity.x, a.velocity.y]);
            } else {
                out.extend_from_slice(&[0.0; SLOT_WIDTH]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// What one agent sees at a step: its observation, its own last message and
/// the messages of its neighbors (nearest first).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    pub agent: usize,
    pub observation: Vec<f64>,
    pub own_message: Vec<f64>,
    pub neighbors: Vec<Neighbor>,
    pub neighbor_messages: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub components: RewardComponents,
    pub local_states: Vec<LocalState>,
    pub done: bool,
}

/// Fresh world: `n_active` agents uniform in the init box, zero velocity and
/// zero messages.
pub fn reset(config: &EnvConfig, message_width: usize, seed: u64) -> Result<WorldState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = config.init_box;
    let mut agents = vec![AgentState::default(); config.n_max];
    for a in agents.iter_mut().take(config.n_active) {
        a.position = Point2::new(rng.random_range(-b..=b), rng.random_range(-b..=b));
        a.active = true;
    }
    Ok(WorldState {
        agents,
        outbox: vec![vec![0.0; message_width]; config.n_max],
        t: 0,
        prev_r_f: 0.0,
        prev_r_v: 0.0,
    })
}

/// Active agents strictly inside the observation radius of `i`, nearest
/// first, ties broken by index. `i` itself is excluded.
pub fn neighbors(state: &WorldState, delta_obs: f64, i: usize) -> Result<Vec<Neighbor>> {
    let me = state.agents.get(i).filter(|a| a.active).ok_or(Error::InactiveAgent(i))?;
    let mut out: Vec<Neighbor> = state
        .agents
        .iter()
        .enumerate()
        .filter(|&(j, a)| j != i && a.active)
        .map(|(j, a)| Neighbor {
            index: j,
            distance: euclidean_distance(me.position, a.position),
        })
        .filter(|n| n.distance < delta_obs)
        .collect();
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    Ok(out)
}

/// Fixed-width observation: slot 0 is the agent itself, then its neighbors
/// nearest first; remaining slots are zero.
pub fn observe(state: &WorldState, delta_obs: f64, i: usize) -> Result<Vec<f64>> {
    let nbrs = neighbors(state, delta_obs, i)?;
    Ok(observation_from(state, i, &nbrs))
}

fn observation_from(state: &WorldState, i: usize, nbrs: &[Neighbor]) -> Vec<f64> {
    let mut out = vec![0.0; SLOT_WIDTH * state.agents.len()];
    let slots = std::iter::once(i).chain(nbrs.iter().map(|n| n.index));
    for (slot, j) in slots.enumerate() {
        let a = &state.agents[j];
        out[slot * SLOT_WIDTH..(slot + 1) * SLOT_WIDTH]
            .copy_from_slice(&[a.position.x, a.position.y, a.velocity.x, a.velocity.y]);
    }
    out
}

/// The environment: a world state plus the configuration and current target
/// formation.
#[derive(Debug, Clone)]
pub struct SwarmEnv {
    config: EnvConfig,
    message_width: usize,
    template: FormationTemplate,
    state: WorldState,
}

impl SwarmEnv {
    pub fn new(config: EnvConfig, message_width: usize, seed: u64) -> Result<Self> {
        let state = reset(&config, message_width, seed)?;
        let template = formation_template(config.n_active)?;
        Ok(Self {
            config,
            message_width,
            template,
            state,
        })
    }

    pub fn reset(&mut self, seed: u64) -> Result<&WorldState> {
        self.state = reset(&self.config, self.message_width, seed)?;
        self.template = formation_template(self.config.n_active)?;
        Ok(&self.state)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn template(&self) -> &FormationTemplate {
        &self.template
    }

    pub fn message_width(&self) -> usize {
        self.message_width
    }

    pub fn done(&self) -> bool {
        self.state.t >= self.config.episode_length
    }

    pub fn neighbors(&self, i: usize) -> Result<Vec<Neighbor>> {
        neighbors(&self.state, self.config.delta_obs, i)
    }

    pub fn observe(&self, i: usize) -> Result<Vec<f64>> {
        observe(&self.state, self.config.delta_obs, i)
    }

    pub fn local_state(&self, i: usize) -> Result<LocalState> {
        let nbrs = self.neighbors(i)?;
        Ok(LocalState {
            agent: i,
            observation: observation_from(&self.state, i, &nbrs),
            own_message: self.state.outbox[i].clone(),
            neighbor_messages: nbrs.iter().map(|n| self.state.outbox[n.index].clone()).collect(),
            neighbors: nbrs,
        })
    }

    /// Local states of every active agent, in index order.
    pub fn local_states(&self) -> Result<Vec<LocalState>> {
        self.state.active_indices().into_iter().map(|i| self.local_state(i)).collect()
    }

    pub fn global_observation(&self) -> Vec<f64> {
        self.state.global_observation()
    }

    /// Current Hausdorff distance to the active template (no lag).
    pub fn formation_distance(&self) -> Result<f64> {
        formation_distance(&self.state, &self.template)
    }

    /// Advances one step. `actions` and `messages` are given per active agent
    /// in index order; actions are clamped to `[-u_range, u_range]` per axis.
    pub fn step(&mut self, actions: &[[f64; 2]], messages: Vec<Vec<f64>>) -> Result<StepResult> {
        let active = self.state.active_indices();
        if actions.len() != active.len() {
            return Err(Error::SizeMismatch {
                what: "actions per active agent",
                expected: active.len(),
                got: actions.len(),
            });
        }
        if messages.len() != active.len() {
            return Err(Error::SizeMismatch {
                what: "messages per active agent",
                expected: active.len(),
                got: messages.len(),
            });
        }
        let cfg = &self.config;
        for (&i, u) in active.iter().zip(actions) {
            let ux = u[0].clamp(-cfg.u_range, cfg.u_range);
            let uy = u[1].clamp(-cfg.u_range, cfg.u_range);
            let a = &mut self.state.agents[i];
            let vx = (a.velocity.x + ux * cfg.dt).clamp(-cfg.v_max, cfg.v_max);
            let vy = (a.velocity.y + uy * cfg.dt).clamp(-cfg.v_max, cfg.v_max);
            a.velocity = Point2::new(vx, vy);
            a.position = Point2::new(a.position.x + vx * cfg.dt, a.position.y + vy * cfg.dt);
        }
        for (&i, m) in active.iter().zip(messages) {
            self.state.outbox[i] = m;
        }
        self.state.t += 1;

        let w = cfg.weights;
        let r_f = match cfg.formation_metric {
            FormationMetric::Hd => formation_reward(&mut self.state, &self.template, w.omega1)?,
            FormationMetric::Ptp => ptp_formation_reward(&mut self.state, &self.template, w.omega1)?,
        };
        let r_v = navigation_reward(&mut self.state, cfg.destination, w.omega2)?;
        let r_c = collision_penalty(&self.state, cfg.delta_safe) as f64;
        let components = RewardComponents { r_f, r_v, r_c };
        Ok(StepResult {
            reward: total_reward(components, &w),
            components,
            local_states: self.local_states()?,
            done: self.done(),
        })
    }

    /// Removes agent `i` from the active set; rewards switch to the template
    /// for the smaller fleet.
    pub fn deactivate_agent(&mut self, i: usize) -> Result<()> {
        if !self.state.agents.get(i).is_some_and(|a| a.active) {
            return Err(Error::InactiveAgent(i));
        }
        let n = self.state.n_active() - 1;
        if n < N_MIN {
            return Err(Error::AgentCountOutOfRange {
                n,
                min: N_MIN,
                max: self.config.n_max,
            });
        }
        self.state.agents[i] = AgentState::default();
        self.state.outbox[i].fill(0.0);
        self.template = formation_template(n)?;
        Ok(())
    }
}
