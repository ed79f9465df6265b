//! Consensus-oriented communication networks.
//!
//! The consensus-establishment (CE) side encodes neighbor distances, refreshes
//! the agent's own message from its observation, aggregates the message rows
//! with multi-head attention, and estimates the global observation from the
//! aggregate `h`. The policy-execution (PE) side encodes the observation,
//! gates `h` into the next outgoing message and maps that message to the mean
//! of a Gaussian action.
//!
//! The two halves own separate [`ParamStore`]s, so the PPO loss (which treats
//! `h` as an input) and the consensus loss never share parameters.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{LocalState, SLOT_WIDTH};
use crate::error::{Error, Result};
use crate::nn::{
    gaussian_logprob, softmax_rows, Activation, AttentionCache, AttentionConfig, LayerSpec, Linear, Mlp, MlpCache,
    MultiHeadAttention, ParamStore,
};
use crate::N_MAX;

/// Network widths. Defaults follow the reference sizing: 256-wide messages
/// and hidden layers, 4 attention heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub message_width: usize,
    pub hidden_width: usize,
    pub heads: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            message_width: 256,
            hidden_width: 256,
            heads: 4,
        }
    }
}

impl NetConfig {
    pub fn obs_width(&self) -> usize {
        SLOT_WIDTH * N_MAX
    }

    /// Width of the global-estimate distribution.
    pub fn estimate_width(&self) -> usize {
        SLOT_WIDTH * N_MAX
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.heads, 2 * self.message_width)
    }
}

/// Which parts of the communication path are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CommMode {
    /// Full architecture with the consensus (KL) loss.
    #[default]
    #[serde(rename = "consmac")]
    ConsMac,
    /// Same networks, consensus loss omitted.
    #[serde(rename = "consmac-no-ce")]
    ConsMacNoCe,
    /// Messages forced to zero and the gate forced to 0.
    #[serde(rename = "no-comm")]
    NoComm,
}

impl CommMode {
    pub fn communicates(self) -> bool {
        self != CommMode::NoComm
    }

    pub fn trains_consensus(self) -> bool {
        self == CommMode::ConsMac
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown mode {s:?} (consmac | consmac-no-ce | no-comm)")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CommMode::ConsMac => "consmac",
            CommMode::ConsMacNoCe => "consmac-no-ce",
            CommMode::NoComm => "no-comm",
        }
    }
}

/// Packed inputs for a batch of agents: each sample owns a span of rows in
/// the neighbor matrices (nearest first).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBatch {
    pub obs: Array2<f64>,
    pub own_messages: Array2<f64>,
    pub neighbor_messages: Array2<f64>,
    pub neighbor_distances: Vec<f64>,
    pub neighbor_spans: Vec<Range<usize>>,
}

impl LocalBatch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }

    pub fn from_local_states(states: &[LocalState], message_width: usize) -> Result<Self> {
        let mut b = LocalBatchBuilder::new(message_width);
        for s in states {
            b.push(
                &s.observation,
                &s.own_message,
                s.neighbor_messages.iter().map(|m| m.as_slice()),
                s.neighbors.iter().map(|n| n.distance),
            )?;
        }
        Ok(b.finish())
    }
}

/// Row-at-a-time construction of a [`LocalBatch`].
#[derive(Debug, Clone)]
pub struct LocalBatchBuilder {
    width: usize,
    obs: Vec<f64>,
    own: Vec<f64>,
    nbr: Vec<f64>,
    dist: Vec<f64>,
    spans: Vec<Range<usize>>,
    obs_width: Option<usize>,
}

impl LocalBatchBuilder {
    pub fn new(message_width: usize) -> Self {
        Self {
            width: message_width,
            obs: Vec::new(),
            own: Vec::new(),
            nbr: Vec::new(),
            dist: Vec::new(),
            spans: Vec::new(),
            obs_width: None,
        }
    }

    pub fn push<'a>(
        &mut self,
        obs: &[f64],
        own_message: &[f64],
        neighbor_messages: impl IntoIterator<Item = &'a [f64]>,
        distances: impl IntoIterator<Item = f64>,
    ) -> Result<()> {
        let ow = *self.obs_width.get_or_insert(obs.len());
        if obs.len() != ow {
            return Err(Error::SizeMismatch {
                what: "observation width",
                expected: ow,
                got: obs.len(),
            });
        }
        if own_message.len() != self.width {
            return Err(Error::SizeMismatch {
                what: "message width",
                expected: self.width,
                got: own_message.len(),
            });
        }
        self.obs.extend_from_slice(obs);
        self.own.extend_from_slice(own_message);
        let start = self.dist.len();
        for m in neighbor_messages {
            if m.len() != self.width {
                return Err(Error::SizeMismatch {
                    what: "message width",
                    expected: self.width,
                    got: m.len(),
                });
            }
            self.nbr.extend_from_slice(m);
        }
        for d in distances {
            if !(d >= 0.0) {
                return Err(Error::InvalidValue {
                    what: "neighbor distance",
                    value: d,
                });
            }
            self.dist.push(d);
        }
        if self.nbr.len() != self.dist.len() * self.width {
            return Err(Error::SizeMismatch {
                what: "neighbor messages vs distances",
                expected: self.dist.len(),
                got: self.nbr.len() / self.width.max(1),
            });
        }
        self.spans.push(start..self.dist.len());
        Ok(())
    }

    pub fn finish(self) -> LocalBatch {
        let b = self.spans.len();
        let ow = self.obs_width.unwrap_or(SLOT_WIDTH * N_MAX);
        let r = self.dist.len();
        LocalBatch {
            obs: Array2::from_shape_vec((b, ow), self.obs).expect("obs rows"),
            own_messages: Array2::from_shape_vec((b, self.width), self.own).expect("message rows"),
            neighbor_messages: Array2::from_shape_vec((r, self.width), self.nbr).expect("neighbor rows"),
            neighbor_distances: self.dist,
            neighbor_spans: self.spans,
        }
    }
}

/// Consensus establishment parameters.
#[derive(Debug, Clone)]
pub struct ConsensusNet {
    pub store: ParamStore,
    pub distance_encoder: Linear,
    pub memory: Mlp,
    pub attention: MultiHeadAttention,
    pub estimator: Mlp,
    width: usize,
}

/// `h` per agent and the estimated global distribution `e_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutput {
    pub h: Array2<f64>,
    pub e_hat: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ConsensusCache {
    memory: MlpCache,
    distances: Array2<f64>,
    attention: AttentionCache,
    estimator: MlpCache,
    self_rows: Vec<usize>,
}

impl ConsensusNet {
    pub fn new<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let w = cfg.message_width;
        let mut store = ParamStore::new();
        let distance_encoder = Linear::new(&mut store, "ce.distance", 1, w, 1.0, rng);
        let memory = Mlp::new(
            &mut store,
            "ce.memory",
            &LayerSpec::new(vec![w + cfg.obs_width(), cfg.hidden_width, w], Activation::Identity),
            rng,
        );
        let attention = MultiHeadAttention::new(&mut store, "ce.attention", 2 * w, w, cfg.attention()?, rng);
        let estimator = Mlp::new(
            &mut store,
            "ce.estimator",
            &LayerSpec::new(vec![w, cfg.hidden_width, cfg.estimate_width()], Activation::Softmax),
            rng,
        );
        Ok(Self {
            store,
            distance_encoder,
            memory,
            attention,
            estimator,
            width: w,
        })
    }

    /// Distance encoding for a column of distances.
    pub fn distance_encode(&self, distances: &[f64]) -> Result<Array2<f64>> {
        if let Some(&d) = distances.iter().find(|&&d| !(d >= 0.0)) {
            return Err(Error::InvalidValue {
                what: "distance",
                value: d,
            });
        }
        let x = Array2::from_shape_vec((distances.len(), 1), distances.to_vec()).expect("column");
        self.distance_encoder.forward(&self.store, &x)
    }

    /// Refreshes own messages from `[message || observation]`.
    pub fn memory_update(&self, own: &Array2<f64>, obs: &Array2<f64>) -> Result<Array2<f64>> {
        self.memory.forward(&self.store, &concat_cols(own, obs))
    }

    pub fn global_estimate(&self, h: &Array2<f64>) -> Result<Array2<f64>> {
        self.estimator.forward(&self.store, h)
    }

    pub fn forward(&self, batch: &LocalBatch) -> Result<(ConsensusOutput, ConsensusCache)> {
        let w = self.width;
        let b = batch.len();
        let memory = self.memory.forward_cached(&self.store, &concat_cols(&batch.own_messages, &batch.obs))?;
        let refreshed = &memory.output;

        // rows: per sample, self row then its neighbors
        let n_rows = b + batch.neighbor_distances.len();
        let mut rows = Array2::<f64>::zeros((n_rows, 2 * w));
        let mut dists = vec![0.0; n_rows];
        let mut self_rows = Vec::with_capacity(b);
        let mut spans = Vec::with_capacity(b);
        for (s, span) in batch.neighbor_spans.iter().enumerate() {
            let base = s + span.start;
            self_rows.push(base);
            spans.push(base..base + 1 + span.len());
            rows.slice_mut(s![base, ..w]).assign(&refreshed.row(s));
            for (k, r) in span.clone().enumerate() {
                rows.slice_mut(s![base + 1 + k, ..w])
                    .assign(&batch.neighbor_messages.row(r));
                dists[base + 1 + k] = batch.neighbor_distances[r];
            }
        }
        let distances = Array2::from_shape_vec((n_rows, 1), dists).expect("column");
        let phi = self.distance_encoder.forward(&self.store, &distances)?;
        rows.slice_mut(s![.., w..]).assign(&phi);

        let queries = rows.select(Axis(0), &self_rows);
        let (h, attention) = self.attention.forward(&self.store, &queries, &rows, &rows, spans)?;
        let estimator = self.estimator.forward_cached(&self.store, &h)?;
        let out = ConsensusOutput {
            h,
            e_hat: estimator.output.clone(),
        };
        Ok((
            out,
            ConsensusCache {
                memory,
                distances,
                attention,
                estimator,
                self_rows,
            },
        ))
    }

    /// Accumulates gradients into this net's store from upstream gradients on
    /// `h` and/or `e_hat`.
    pub fn backward(&mut self, cache: &ConsensusCache, d_h: Option<&Array2<f64>>, d_e_hat: Option<&Array2<f64>>) {
        let w = self.width;
        let b = cache.self_rows.len();
        let mut dh = match d_h {
            Some(d) => d.clone(),
            None => Array2::zeros((b, w)),
        };
        if let Some(de) = d_e_hat {
            let from_est = self
                .estimator
                .backward(&mut self.store, &cache.estimator, de, true)
                .expect("input gradient requested");
            dh += &from_est;
        }
        let (dq, dk, dv) = self.attention.backward(&mut self.store, &cache.attention, &dh);
        let mut drows = dk + dv;
        for (s, &r) in cache.self_rows.iter().enumerate() {
            let mut row = drows.row_mut(r);
            row += &dq.row(s);
        }
        let dphi = drows.slice(s![.., w..]).to_owned();
        self.distance_encoder
            .backward(&mut self.store, &cache.distances, &dphi, false);
        let drefreshed = drows.select(Axis(0), &cache.self_rows).slice(s![.., ..w]).to_owned();
        self.memory.backward(&mut self.store, &cache.memory, &drefreshed, false);
    }
}

fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("same row count")
}

/// Policy execution parameters.
#[derive(Debug, Clone)]
pub struct ExecutionNet {
    pub store: ParamStore,
    pub obs_encoder: Mlp,
    pub gate: Mlp,
    pub executor: Linear,
    pub action_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutput {
    pub next_message: Array2<f64>,
    pub mu: Array2<f64>,
    pub gate: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ExecutionCache {
    encoder: MlpCache,
    gate: Option<MlpCache>,
    h: Array2<f64>,
    next_message: Array2<f64>,
    squashed: Array2<f64>,
}

impl ExecutionNet {
    pub fn new<R: Rng + ?Sized>(cfg: &NetConfig, action_scale: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let obs = cfg.obs_width();
        let obs_encoder = Mlp::new(
            &mut store,
            "pe.encoder",
            &LayerSpec::new(vec![obs, cfg.hidden_width, cfg.message_width], Activation::Identity),
            rng,
        );
        let gate = Mlp::new(
            &mut store,
            "pe.gate",
            &LayerSpec::new(vec![obs, cfg.hidden_width, 1], Activation::Sigmoid),
            rng,
        );
        let executor = Linear::new(&mut store, "pe.executor", cfg.message_width, 2, 0.01, rng);
        Self {
            store,
            obs_encoder,
            gate,
            executor,
            action_scale,
        }
    }

    /// `m_next = E_o + w * h`, `mu = scale * tanh(executor(m_next))`. Without
    /// communication the gate is forced to zero.
    pub fn forward(&self, obs: &Array2<f64>, h: &Array2<f64>, communicate: bool) -> Result<(ExecutionOutput, ExecutionCache)> {
        let encoder = self.obs_encoder.forward_cached(&self.store, obs)?;
        if h.dim() != encoder.output.dim() {
            return Err(Error::SizeMismatch {
                what: "consensus width",
                expected: encoder.output.ncols(),
                got: h.ncols(),
            });
        }
        let (gate_cache, gate) = if communicate {
            let c = self.gate.forward_cached(&self.store, obs)?;
            let g = c.output.clone();
            (Some(c), g)
        } else {
            (None, Array2::zeros((obs.nrows(), 1)))
        };
        let next_message = if communicate {
            &encoder.output + &(h * &gate)
        } else {
            encoder.output.clone()
        };
        let squashed = self.executor.forward(&self.store, &next_message)?.mapv_into(f64::tanh);
        let mu = &squashed * self.action_scale;
        let out = ExecutionOutput {
            next_message: next_message.clone(),
            mu,
            gate,
        };
        Ok((
            out,
            ExecutionCache {
                encoder,
                gate: gate_cache,
                h: h.clone(),
                next_message,
                squashed,
            },
        ))
    }

    /// Backpropagates `d_mu`; returns the gradient w.r.t. `h`.
    pub fn backward(&mut self, cache: &ExecutionCache, d_mu: &Array2<f64>) -> Array2<f64> {
        let dpre = d_mu * &cache.squashed.mapv(|t| self.action_scale * (1.0 - t * t));
        let dmsg = self
            .executor
            .backward(&mut self.store, &cache.next_message, &dpre, true)
            .expect("input gradient requested");
        self.obs_encoder.backward(&mut self.store, &cache.encoder, &dmsg, false);
        match &cache.gate {
            Some(gc) => {
                let dgate = (&dmsg * &cache.h).sum_axis(Axis(1)).insert_axis(Axis(1));
                self.gate.backward(&mut self.store, gc, &dgate, false);
                &dmsg * &gc.output
            }
            None => Array2::zeros(cache.h.raw_dim()),
        }
    }
}

/// A full agent policy: consensus and execution halves sharing nothing.
#[derive(Debug, Clone)]
pub struct ConsMacPolicy {
    pub net: NetConfig,
    pub ce: ConsensusNet,
    pub pe: ExecutionNet,
}

/// Everything one forward step produces for a batch of agents.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub consensus: ConsensusOutput,
    pub execution: ExecutionOutput,
    /// Messages to broadcast (zero without communication).
    pub broadcast: Array2<f64>,
}

impl ConsMacPolicy {
    pub fn new(net: &NetConfig, action_scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ce = ConsensusNet::new(net, &mut rng)?;
        let pe = ExecutionNet::new(net, action_scale, &mut rng);
        Ok(Self {
            net: net.clone(),
            ce,
            pe,
        })
    }

    pub fn act(&self, batch: &LocalBatch, mode: CommMode) -> Result<PolicyStep> {
        let consensus = if mode.communicates() {
            self.ce.forward(batch)?.0
        } else {
            ConsensusOutput {
                h: Array2::zeros((batch.len(), self.net.message_width)),
                e_hat: Array2::from_elem(
                    (batch.len(), self.net.estimate_width()),
                    1.0 / self.net.estimate_width() as f64,
                ),
            }
        };
        let (execution, _) = self.pe.forward(&batch.obs, &consensus.h, mode.communicates())?;
        let broadcast = if mode.communicates() {
            execution.next_message.clone()
        } else {
            Array2::zeros(execution.next_message.raw_dim())
        };
        Ok(PolicyStep {
            consensus,
            execution,
            broadcast,
        })
    }
}

/// Exploration noise bounds.
pub const SIGMA_MIN: f64 = 0.01;
pub const SIGMA_MAX: f64 = 0.5;

/// A sampled action: the raw Gaussian draw (whose log-density is recorded)
/// and the clamped action sent to the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledAction {
    pub raw: [f64; 2],
    pub executed: [f64; 2],
    pub log_prob: f64,
}

pub fn sample_action<R: Rng + ?Sized>(mu: ArrayView1<f64>, sigma: f64, bound: f64, rng: &mut R) -> Result<SampledAction> {
    if !(SIGMA_MIN..=SIGMA_MAX).contains(&sigma) {
        return Err(Error::InvalidValue {
            what: "sigma",
            value: sigma,
        });
    }
    let mut raw = [0.0; 2];
    for (r, &m) in raw.iter_mut().zip(mu.iter()) {
        let z: f64 = rng.sample(StandardNormal);
        *r = m + sigma * z;
    }
    let log_prob = gaussian_logprob(mu, sigma, ArrayView1::from(&raw));
    Ok(SampledAction {
        raw,
        executed: raw.map(|v| v.clamp(-bound, bound)),
        log_prob,
    })
}

/// Linear decay from [`SIGMA_MAX`] at episode 0 to [`SIGMA_MIN`] at the last
/// episode.
pub fn sigma_schedule(episode: usize, episodes: usize) -> f64 {
    if episodes <= 1 {
        return SIGMA_MAX;
    }
    let frac = (episode.min(episodes - 1)) as f64 / (episodes - 1) as f64;
    SIGMA_MAX + (SIGMA_MIN - SIGMA_MAX) * frac
}

/// Mean over samples of `KL(softmax(o_g) || e_hat)`.
pub fn ce_loss(e_hat: &Array2<f64>, global_obs: &Array2<f64>) -> Result<f64> {
    Ok(ce_loss_with_grad(e_hat, global_obs)?.0)
}

/// [`ce_loss`] and its gradient w.r.t. `e_hat`.
pub fn ce_loss_with_grad(e_hat: &Array2<f64>, global_obs: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if e_hat.dim() != global_obs.dim() {
        return Err(Error::SizeMismatch {
            what: "global estimate width",
            expected: global_obs.ncols(),
            got: e_hat.ncols(),
        });
    }
    let target = softmax_rows(global_obs);
    let b = e_hat.nrows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(e_hat.raw_dim());
    ndarray::Zip::from(&target)
        .and(e_hat)
        .and(&mut grad)
        .for_each(|&p, &q, g| {
            if p > 0.0 {
                loss += p * (p / q).ln();
            }
            *g = -p / (q * b);
        });
    Ok((loss / b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> NetConfig {
        NetConfig {
            message_width: 6,
            hidden_width: 5,
            heads: 2,
        }
    }

    fn batch_of(states: &[(Vec<f64>, Vec<f64>, Vec<(Vec<f64>, f64)>)], w: usize) -> LocalBatch {
        let mut b = LocalBatchBuilder::new(w);
        for (o, m, nbrs) in states {
            b.push(o, m, nbrs.iter().map(|(m, _)| m.as_slice()), nbrs.iter().map(|(_, d)| *d))
                .unwrap();
        }
        b.finish()
    }

    fn obs(seed: f64) -> Vec<f64> {
        (0..32).map(|k| ((k as f64 + seed) * 0.37).sin()).collect()
    }

    #[test]
    fn distance_encoder_is_affine() {
        let p = ConsMacPolicy::new(&tiny(), 0.5, 1).unwrap();
        let phi = p.ce.distance_encode(&[0.0, 1.0, 2.0, 1.0]).unwrap();
        let bias = p.ce.store.value(p.ce.distance_encoder.b);
        assert_eq!(phi.row(0), bias.row(0));
        for c in 0..6 {
            assert!((phi[[2, c]] - 2.0 * phi[[1, c]] + phi[[0, c]]).abs() < 1e-14);
        }
        assert_eq!(phi.row(1), phi.row(3));
        assert!(p.ce.distance_encode(&[-0.1]).is_err());
    }

    #[test]
    fn memory_update_shapes_and_zero_params() {
        let mut p = ConsMacPolicy::new(&tiny(), 0.5, 2).unwrap();
        let m = Array2::from_elem((1, 6), 0.3);
        let o1 = Array2::from_shape_vec((1, 32), obs(0.0)).unwrap();
        let o2 = Array2::from_shape_vec((1, 32), obs(1.0)).unwrap();
        let a = p.ce.memory_update(&m, &o1).unwrap();
        let b = p.ce.memory_update(&m, &o2).unwrap();
        assert_eq!(a.ncols(), 6);
        assert_ne!(a, b);
        assert!(p.ce.memory_update(&Array2::zeros((1, 5)), &o1).is_err());
        for prm in p.ce.store.params_mut() {
            prm.value.fill(0.0);
        }
        assert!(p.ce.memory_update(&m, &o1).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_estimate_is_a_distribution() {
        let mut p = ConsMacPolicy::new(&tiny(), 0.5, 3).unwrap();
        let h = Array2::from_shape_fn((3, 6), |(i, j)| (i * 7 + j) as f64 * 0.1 - 1.0);
        let e = p.ce.global_estimate(&h).unwrap();
        assert_eq!(e.ncols(), 32);
        for row in e.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        for prm in p.ce.store.params_mut() {
            prm.value.fill(0.0);
        }
        let e = p.ce.global_estimate(&h).unwrap();
        assert!(e.iter().all(|&v| (v - 1.0 / 32.0).abs() < 1e-15));
    }

    #[test]
    fn lone_agent_attends_to_itself() {
        let p = ConsMacPolicy::new(&tiny(), 0.5, 4).unwrap();
        let b = batch_of(&[(obs(0.0), vec![0.0; 6], vec![])], 6);
        let (out, cache) = p.ce.forward(&b).unwrap();
        assert_eq!(cache.attention.weights(0, 0), &[1.0]);
        assert_eq!(cache.attention.weights(0, 1), &[1.0]);
        // h = ([m' || phi(0)] W_V) W_O
        let m1 = p.ce.memory_update(&b.own_messages, &b.obs).unwrap();
        let phi = p.ce.distance_encode(&[0.0]).unwrap();
        let row = concat_cols(&m1, &phi);
        let want = row.dot(p.ce.store.value(p.ce.attention.w_v)).dot(p.ce.store.value(p.ce.attention.w_o));
        for (a, b) in out.h.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(out.h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn equidistant_identical_neighbors_commute() {
        let p = ConsMacPolicy::new(&tiny(), 0.5, 5).unwrap();
        let m = vec![0.2, -0.1, 0.4, 0.0, 0.3, -0.5];
        let other = vec![0.9, 0.1, -0.4, 0.2, 0.0, 0.1];
        let b1 = batch_of(
            &[(obs(1.0), vec![0.1; 6], vec![(m.clone(), 1.5), (m.clone(), 1.5), (other.clone(), 2.0)])],
            6,
        );
        let b2 = batch_of(
            &[(obs(1.0), vec![0.1; 6], vec![(m.clone(), 1.5), (m, 1.5), (other, 2.0)])],
            6,
        );
        let h1 = p.ce.forward(&b1).unwrap().0.h;
        let h2 = p.ce.forward(&b2).unwrap().0.h;
        assert_eq!(h1, h2);
    }

    #[test]
    fn one_neighbor_matches_unrolled_attention() {
        let cfg = tiny();
        let p = ConsMacPolicy::new(&cfg, 0.5, 6).unwrap();
        let nm = vec![0.5, -0.3, 0.2, 0.1, 0.0, -0.7];
        let b = batch_of(&[(obs(2.0), vec![0.05; 6], vec![(nm.clone(), 0.8)])], 6);
        let h = p.ce.forward(&b).unwrap().0.h;

        let st = &p.ce.store;
        let m1 = p.ce.memory_update(&b.own_messages, &b.obs).unwrap();
        let phi = p.ce.distance_encode(&[0.0, 0.8]).unwrap();
        let e0: Vec<f64> = m1.row(0).iter().chain(phi.row(0).iter()).copied().collect();
        let e1: Vec<f64> = nm.iter().chain(phi.row(1).iter()).copied().collect();
        let proj = |e: &[f64], w: &Array2<f64>| -> Vec<f64> {
            (0..w.ncols()).map(|c| (0..e.len()).map(|r| e[r] * w[[r, c]]).sum()).collect()
        };
        let q0 = proj(&e0, st.value(p.ce.attention.w_q));
        let (k0, k1) = (proj(&e0, st.value(p.ce.attention.w_k)), proj(&e1, st.value(p.ce.attention.w_k)));
        let (v0, v1) = (proj(&e0, st.value(p.ce.attention.w_v)), proj(&e1, st.value(p.ce.attention.w_v)));
        let hw = 6; // 2*6 / 2 heads
        let mut ctx = vec![0.0; 12];
        for head in 0..2 {
            let r = head * hw..(head + 1) * hw;
            let s0: f64 = r.clone().map(|c| q0[c] * k0[c]).sum::<f64>() / (hw as f64).sqrt();
            let s1: f64 = r.clone().map(|c| q0[c] * k1[c]).sum::<f64>() / (hw as f64).sqrt();
            let (a0, a1) = (1.0 / (1.0 + (s1 - s0).exp()), 1.0 / (1.0 + (s0 - s1).exp()));
            for c in r {
                ctx[c] = a0 * v0[c] + a1 * v1[c];
            }
        }
        let want = proj(&ctx, st.value(p.ce.attention.w_o));
        for (a, b) in h.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn execution_gate_and_action_bounds() {
        let mut p = ConsMacPolicy::new(&tiny(), 0.5, 7).unwrap();
        let o = Array2::from_shape_vec((2, 32), [obs(0.0), obs(3.0)].concat()).unwrap();
        let h = Array2::from_shape_fn((2, 6), |(i, j)| (i + j) as f64 - 2.0);

        let (out, _) = p.pe.forward(&o, &h, false).unwrap();
        let eo = p.pe.obs_encoder.forward(&p.pe.store, &o).unwrap();
        assert_eq!(out.next_message, eo);

        // force the gate to 1 and the encoder to 0
        let last = *p.pe.gate.layers.last().unwrap();
        p.pe.store.value_mut(last.w).fill(0.0);
        p.pe.store.value_mut(last.b).fill(1e3);
        let enc_last = *p.pe.obs_encoder.layers.last().unwrap();
        p.pe.store.value_mut(enc_last.w).fill(0.0);
        p.pe.store.value_mut(enc_last.b).fill(0.0);
        let (out, _) = p.pe.forward(&o, &h, true).unwrap();
        assert_eq!(out.next_message, h);

        // large executor weights still give |mu| <= 0.5
        p.pe.store.value_mut(p.pe.executor.w).fill(50.0);
        let (out, _) = p.pe.forward(&o, &h, true).unwrap();
        assert!(out.mu.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn no_comm_broadcasts_zeros() {
        let p = ConsMacPolicy::new(&tiny(), 0.5, 8).unwrap();
        let b = batch_of(&[(obs(0.0), vec![0.4; 6], vec![(vec![0.3; 6], 1.0)])], 6);
        let step = p.act(&b, CommMode::NoComm).unwrap();
        assert!(step.broadcast.iter().all(|&v| v == 0.0));
        assert!(step.execution.gate.iter().all(|&v| v == 0.0));
        let step = p.act(&b, CommMode::ConsMac).unwrap();
        assert!(step.broadcast.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sampling_contract() {
        let mu = array![0.2, -0.1];
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = sample_action(mu.view(), 0.3, 0.5, &mut r1).unwrap();
        let b = sample_action(mu.view(), 0.3, 0.5, &mut r2).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let s = sample_action(mu.view(), 0.01, 0.5, &mut rng).unwrap();
            assert!((s.raw[0] - 0.2).abs() < 0.05 && (s.raw[1] + 0.1).abs() < 0.05);
            assert!(s.executed.iter().all(|v| v.abs() <= 0.5));
            assert!(s.log_prob.is_finite());
        }
        assert!(sample_action(mu.view(), 0.6, 0.5, &mut rng).is_err());
        assert!(sample_action(mu.view(), 0.005, 0.5, &mut rng).is_err());
    }

    #[test]
    fn sample_mean_converges() {
        let mu = array![0.1, -0.3];
        let sigma = 0.5;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let s = sample_action(mu.view(), sigma, 10.0, &mut rng).unwrap();
            sum[0] += s.raw[0];
            sum[1] += s.raw[1];
        }
        let tol = 3.0 * sigma / (n as f64).sqrt();
        assert!((sum[0] / n as f64 - 0.1).abs() < tol);
        assert!((sum[1] / n as f64 + 0.3).abs() < tol);
    }

    #[test]
    fn sigma_decays_linearly() {
        assert_eq!(sigma_schedule(0, 350), 0.5);
        assert!((sigma_schedule(349, 350) - 0.01).abs() < 1e-15);
        let mid = sigma_schedule(100, 350);
        assert!(mid < 0.5 && mid > 0.01);
    }

    #[test]
    fn ce_loss_examples() {
        let e = array![[0.25, 0.75]];
        assert!(ce_loss(&e, &array![[0.0, 3f64.ln()]]).unwrap().abs() < 1e-15);
        // e_g = [0.5, 0.5]
        let l = ce_loss(&e, &array![[1.0, 1.0]]).unwrap();
        assert!((l - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((l - 0.14384).abs() < 1e-5);
        assert!(ce_loss(&e, &array![[1.0, 1.0, 1.0]]).is_err());
    }

    #[test]
    fn mode_names() {
        for m in [CommMode::ConsMac, CommMode::ConsMacNoCe, CommMode::NoComm] {
            assert_eq!(CommMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(CommMode::parse("tarmac").is_err());
    }
}
