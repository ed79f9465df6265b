//! Policy distillation: harvest `(z, u, h)` tuples from per-size teachers and
//! regress one student onto both the teacher actions and consensus vectors.
//!
//! Tuples do not copy messages. Each environment step is stored once as a
//! [`ReplayFrame`] holding every slot's broadcast message; a tuple refers to
//! its frame and lists its neighbors by slot index, so the student input is
//! rebuilt on demand in the fixed `N_MAX` layout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consmac::{CommMode, ConsMacPolicy, LocalBatch, LocalBatchBuilder, NetConfig};
use crate::env::{EnvConfig, Neighbor, SwarmEnv};
use crate::error::{Error, Result};
use crate::mappo::TeacherModel;
use crate::nn::AdamConfig;
use crate::N_MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Gradient steps on the student (one sampled batch each).
    pub episodes: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Environment steps harvested per teacher.
    pub steps_per_teacher: usize,
    pub heldout_fraction: f64,
    /// Held-out evaluation period, in episodes.
    pub eval_every: usize,
    pub max_grad_norm: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            episodes: 200_000,
            batch_size: 500,
            lr: 2e-4,
            seed: 1,
            steps_per_teacher: 60_000,
            heldout_fraction: 0.1,
            eval_every: 1_000,
            max_grad_norm: 10.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_teacher == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, steps_per_teacher and eval_every must be positive".into()));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::Config(format!("heldout_fraction = {} must be in (0, 1)", self.heldout_fraction)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// One environment step of one teacher: every slot's current outgoing
/// message (zero for inactive slots) and the padded global observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayFrame {
    pub source_n: usize,
    pub messages: Array2<f64>,
    pub global_obs: Vec<f64>,
}

/// A single agent's input at one step, with the teacher's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTuple {
    pub frame: usize,
    pub agent: usize,
    pub observation: Vec<f64>,
    pub neighbors: Vec<Neighbor>,
    /// Teacher mean action.
    pub u: [f64; 2],
    /// Teacher consensus vector.
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayMemory {
    pub message_width: usize,
    pub frames: Vec<ReplayFrame>,
    pub tuples: Vec<ReplayTuple>,
}

/// Summary written next to the binary record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySidecar {
    pub format_version: u32,
    pub frames: usize,
    pub tuples: usize,
    pub message_width: usize,
    pub obs_width: usize,
    pub n_max: usize,
    pub source_n_histogram: BTreeMap<usize, usize>,
}

const REPLAY_MAGIC: &[u8; 4] = b"FLRP";
const REPLAY_VERSION: u32 = 1;

impl ReplayMemory {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn source_n(&self, tuple: usize) -> usize {
        self.frames[self.tuples[tuple].frame].source_n
    }

    /// Tuple indices grouped by teacher fleet size.
    pub fn by_teacher(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.tuples.iter().enumerate() {
            map.entry(self.frames[t.frame].source_n).or_default().push(i);
        }
        map
    }

    pub fn histogram(&self) -> BTreeMap<usize, usize> {
        self.by_teacher().into_iter().map(|(n, v)| (n, v.len())).collect()
    }

    /// Student input for the given tuples, rebuilt from their frames.
    pub fn inputs(&self, tuples: &[usize]) -> Result<LocalBatch> {
        let mut b = LocalBatchBuilder::new(self.message_width);
        for &i in tuples {
            let t = &self.tuples[i];
            let f = &self.frames[t.frame];
            b.push(
                &t.observation,
                f.messages.row(t.agent).as_slice().expect("contiguous row"),
                t.neighbors
                    .iter()
                    .map(|n| f.messages.row(n.index).to_slice().expect("contiguous row")),
                t.neighbors.iter().map(|n| n.distance),
            )?;
        }
        Ok(b.finish())
    }

    /// Teacher targets `(u, h)` for the given tuples.
    pub fn targets(&self, tuples: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let u = Array2::from_shape_fn((tuples.len(), 2), |(r, c)| self.tuples[tuples[r]].u[c]);
        let h = Array2::from_shape_fn((tuples.len(), self.message_width), |(r, c)| self.tuples[tuples[r]].h[c]);
        (u, h)
    }

    pub fn sidecar(&self) -> ReplaySidecar {
        ReplaySidecar {
            format_version: REPLAY_VERSION,
            frames: self.frames.len(),
            tuples: self.tuples.len(),
            message_width: self.message_width,
            obs_width: self.tuples.first().map_or(4 * N_MAX, |t| t.observation.len()),
            n_max: N_MAX,
            source_n_histogram: self.histogram(),
        }
    }

    /// Writes the binary record file and `<path>.json` with the summary.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(REPLAY_MAGIC)?;
        put(&REPLAY_VERSION.to_le_bytes())?;
        put(&(self.message_width as u64).to_le_bytes())?;
        put(&(self.frames.len() as u64).to_le_bytes())?;
        put(&(self.tuples.len() as u64).to_le_bytes())?;
        for f in &self.frames {
            put(&(f.source_n as u64).to_le_bytes())?;
            put(&(f.global_obs.len() as u64).to_le_bytes())?;
            for v in f.messages.iter().chain(&f.global_obs) {
                put(&v.to_le_bytes())?;
            }
        }
        for t in &self.tuples {
            put(&(t.frame as u64).to_le_bytes())?;
            put(&(t.agent as u64).to_le_bytes())?;
            put(&(t.observation.len() as u64).to_le_bytes())?;
            put(&(t.neighbors.len() as u64).to_le_bytes())?;
            for v in &t.observation {
                put(&v.to_le_bytes())?;
            }
            for n in &t.neighbors {
                put(&(n.index as u64).to_le_bytes())?;
                put(&n.distance.to_le_bytes())?;
            }
            for v in t.u.iter().chain(&t.h) {
                put(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let sidecar = serde_json::to_string_pretty(&self.sidecar())?;
        let side = sidecar_path(path);
        std::fs::write(&side, sidecar).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            inner: BufReader::new(file),
            path,
        };
        let mut magic = [0u8; 4];
        r.bytes(&mut magic)?;
        if &magic != REPLAY_MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != REPLAY_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: REPLAY_VERSION,
            });
        }
        let width = r.usize()?;
        let n_frames = r.usize()?;
        let n_tuples = r.usize()?;
        let mut frames = Vec::with_capacity(n_frames.min(1 << 20));
        for _ in 0..n_frames {
            let source_n = r.usize()?;
            let gw = r.usize()?;
            let messages = Array2::from_shape_vec((N_MAX, width), r.f64s(N_MAX * width)?).expect("frame shape");
            let global_obs = r.f64s(gw)?;
            frames.push(ReplayFrame {
                source_n,
                messages,
                global_obs,
            });
        }
        let mut tuples = Vec::with_capacity(n_tuples.min(1 << 22));
        for _ in 0..n_tuples {
            let frame = r.usize()?;
            let agent = r.usize()?;
            let ow = r.usize()?;
            let k = r.usize()?;
            if frame >= frames.len() || agent >= N_MAX || k >= N_MAX {
                return Err(r.corrupt("tuple index out of range"));
            }
            let observation = r.f64s(ow)?;
            let mut neighbors = Vec::with_capacity(k);
            for _ in 0..k {
                let index = r.usize()?;
                let distance = r.f64()?;
                if index >= N_MAX {
                    return Err(r.corrupt("neighbor index out of range"));
                }
                neighbors.push(Neighbor { index, distance });
            }
            let u = [r.f64()?, r.f64()?];
            let h = r.f64s(width)?;
            tuples.push(ReplayTuple {
                frame,
                agent,
                observation,
                neighbors,
                u,
                h,
            });
        }
        Ok(Self {
            message_width: width,
            frames,
            tuples,
        })
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn corrupt(&self, reason: &str) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| self.corrupt("truncated"))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn usize(&mut self) -> Result<usize> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| self.corrupt("length overflow"))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Rolls each teacher out deterministically (`u = mu`) in an environment with
/// its own fleet size and records every active agent's step. Teachers must
/// cover `5..=8`.
pub fn collect_replay(
    teachers: &BTreeMap<usize, TeacherModel>,
    base_env: &EnvConfig,
    mode: CommMode,
    steps_per_teacher: usize,
    seed: u64,
) -> Result<ReplayMemory> {
    for n in crate::N_MIN..=N_MAX {
        if !teachers.contains_key(&n) {
            return Err(Error::MissingTeacher(n));
        }
    }
    let width = teachers
        .values()
        .next()
        .map(|t| t.policy.net.message_width)
        .unwrap_or_default();
    let mut memory = ReplayMemory {
        message_width: width,
        ..Default::default()
    };
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    for (&n, teacher) in teachers {
        if teacher.policy.net.message_width != width {
            return Err(Error::SizeMismatch {
                what: "teacher message width",
                expected: width,
                got: teacher.policy.net.message_width,
            });
        }
        let cfg = EnvConfig {
            n_active: n,
            ..base_env.clone()
        };
        let mut env = SwarmEnv::new(cfg, width, 0)?;
        let mut steps = 0;
        while steps < steps_per_teacher {
            env.reset(seeds.random())?;
            while !env.done() && steps < steps_per_teacher {
                harvest_step(&mut env, teacher, mode, &mut memory)?;
                steps += 1;
            }
        }
    }
    Ok(memory)
}

fn harvest_step(env: &mut SwarmEnv, teacher: &TeacherModel, mode: CommMode, memory: &mut ReplayMemory) -> Result<()> {
    let width = memory.message_width;
    let state = env.state();
    let mut messages = Array2::zeros((N_MAX, width));
    for (slot, m) in state.outbox.iter().enumerate().take(N_MAX) {
        if state.agents[slot].active && m.len() == width {
            messages.row_mut(slot).assign(&ndarray::ArrayView1::from(m.as_slice()));
        }
    }
    let frame = memory.frames.len();
    memory.frames.push(ReplayFrame {
        source_n: state.n_active(),
        messages,
        global_obs: state.global_observation(),
    });
    let locals = env.local_states()?;
    let batch = LocalBatch::from_local_states(&locals, width)?;
    let out = teacher.policy.act(&batch, mode)?;
    let mut actions = Vec::with_capacity(locals.len());
    for (k, s) in locals.into_iter().enumerate() {
        let mu = out.execution.mu.row(k);
        let u = [mu[0], mu[1]];
        actions.push(u);
        memory.tuples.push(ReplayTuple {
            frame,
            agent: s.agent,
            observation: s.observation,
            neighbors: s.neighbors,
            u,
            h: out.consensus.h.row(k).to_vec(),
        });
    }
    let broadcast = out.broadcast.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    env.step(&actions, broadcast)?;
    Ok(())
}

/// Batch mean of `||u - u_S||^2 + ||h - h_S||^2`.
pub fn distill_loss(student_u: &Array2<f64>, student_h: &Array2<f64>, u: &Array2<f64>, h: &Array2<f64>) -> Result<f64> {
    check_shape("student actions", student_u, u)?;
    check_shape("student consensus", student_h, h)?;
    let b = u.nrows().max(1) as f64;
    let du = (student_u - u).mapv(|x| x * x).sum();
    let dh = (student_h - h).mapv(|x| x * x).sum();
    Ok((du + dh) / b)
}

fn check_shape(what: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::SizeMismatch {
            what,
            expected: b.len(),
            got: a.len(),
        });
    }
    Ok(())
}

/// Separate action and consensus errors, each a batch mean of squared norms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DistillError {
    pub action_mse: f64,
    pub h_mse: f64,
}

impl DistillError {
    pub fn total(&self) -> f64 {
        self.action_mse + self.h_mse
    }
}

/// Student forward on a batch plus the loss; accumulates gradients into both
/// student stores when `backward` is set.
pub fn distill_pass(
    student: &mut ConsMacPolicy,
    inputs: &LocalBatch,
    u: &Array2<f64>,
    h: &Array2<f64>,
    backward: bool,
) -> Result<DistillError> {
    let (cons, ce_cache) = student.ce.forward(inputs)?;
    let (exec, pe_cache) = student.pe.forward(&inputs.obs, &cons.h, true)?;
    check_shape("teacher actions", &exec.mu, u)?;
    check_shape("teacher consensus", &cons.h, h)?;
    let b = u.nrows().max(1) as f64;
    let err_u = &exec.mu - u;
    let err_h = &cons.h - h;
    let e = DistillError {
        action_mse: err_u.mapv(|x| x * x).sum() / b,
        h_mse: err_h.mapv(|x| x * x).sum() / b,
    };
    if backward {
        let d_mu = err_u * (2.0 / b);
        let mut d_h = student.pe.backward(&pe_cache, &d_mu);
        d_h.scaled_add(2.0 / b, &err_h);
        student.ce.backward(&ce_cache, Some(&d_h), None);
    }
    Ok(e)
}

/// Split of the memory into training and held-out tuple indices, per teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySplit {
    pub train: BTreeMap<usize, Vec<usize>>,
    pub heldout: Vec<usize>,
}

pub fn split_memory(memory: &ReplayMemory, heldout_fraction: f64, seed: u64) -> ReplaySplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = BTreeMap::new();
    let mut heldout = Vec::new();
    for (n, mut idx) in memory.by_teacher() {
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64) * heldout_fraction).round() as usize;
        let k = k.min(idx.len().saturating_sub(1));
        heldout.extend_from_slice(&idx[..k]);
        train.insert(n, idx[k..].to_vec());
    }
    heldout.sort_unstable();
    ReplaySplit { train, heldout }
}

/// Draws a batch: each element picks a teacher uniformly, then one of its
/// training tuples uniformly, so every teacher contributes a quarter of the
/// samples regardless of fleet size.
pub fn sample_batch<R: Rng + ?Sized>(train: &BTreeMap<usize, Vec<usize>>, batch: usize, rng: &mut R) -> Vec<usize> {
    let groups: Vec<&Vec<usize>> = train.values().filter(|v| !v.is_empty()).collect();
    if groups.is_empty() {
        return Vec::new();
    }
    (0..batch)
        .map(|_| {
            let g = groups[rng.random_range(0..groups.len())];
            g[rng.random_range(0..g.len())]
        })
        .collect()
}

/// Held-out errors, evaluated in chunks.
pub fn evaluate_student(student: &mut ConsMacPolicy, memory: &ReplayMemory, tuples: &[usize]) -> Result<DistillError> {
    let mut total = DistillError::default();
    if tuples.is_empty() {
        return Ok(total);
    }
    for chunk in tuples.chunks(1000) {
        let inputs = memory.inputs(chunk)?;
        let (u, h) = memory.targets(chunk);
        let e = distill_pass(student, &inputs, &u, &h, false)?;
        let w = chunk.len() as f64 / tuples.len() as f64;
        total.action_mse += e.action_mse * w;
        total.h_mse += e.h_mse * w;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DistillMetrics {
    pub episode: usize,
    pub train_loss: f64,
    pub heldout_action_mse: f64,
    pub heldout_h_mse: f64,
}

impl DistillMetrics {
    pub const CSV_HEADER: &'static str = "episode,train_loss,heldout_action_mse,heldout_h_mse";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.episode, self.train_loss, self.heldout_action_mse, self.heldout_h_mse
        )
    }
}

#[derive(Debug, Clone)]
pub struct StudentOutcome {
    pub student: ConsMacPolicy,
    pub initial: DistillError,
    pub last: DistillError,
    pub metrics: Vec<DistillMetrics>,
}

/// Adam on the distillation loss over both student stores. Logs held-out
/// errors at episode 0, every `eval_every` episodes and at the end.
pub fn train_student(
    memory: &ReplayMemory,
    net: &NetConfig,
    action_scale: f64,
    cfg: &DistillConfig,
    mut on_eval: impl FnMut(&DistillMetrics),
) -> Result<StudentOutcome> {
    cfg.validate()?;
    if memory.is_empty() {
        return Err(Error::Config("replay memory is empty".into()));
    }
    if net.message_width != memory.message_width {
        return Err(Error::SizeMismatch {
            what: "student message width",
            expected: memory.message_width,
            got: net.message_width,
        });
    }
    let mut student = ConsMacPolicy::new(net, action_scale, cfg.seed)?;
    let split = split_memory(memory, cfg.heldout_fraction, cfg.seed ^ 0x5911);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xd157));
    let adam = AdamConfig::with_lr(cfg.lr);

    let initial = evaluate_student(&mut student, memory, &split.heldout)?;
    let mut metrics = vec![DistillMetrics {
        episode: 0,
        train_loss: f64::NAN,
        heldout_action_mse: initial.action_mse,
        heldout_h_mse: initial.h_mse,
    }];
    on_eval(&metrics[0]);
    let mut last = initial;
    for episode in 1..=cfg.episodes {
        let batch = sample_batch(&split.train, cfg.batch_size, &mut rng);
        let inputs = memory.inputs(&batch)?;
        let (u, h) = memory.targets(&batch);
        student.ce.store.zero_grad();
        student.pe.store.zero_grad();
        let e = distill_pass(&mut student, &inputs, &u, &h, true)?;
        if !e.total().is_finite() {
            return Err(Error::Diverged {
                what: "distillation loss",
                episode,
                detail: format!("{e:?}"),
            });
        }
        student.ce.store.clip_grad_norm(cfg.max_grad_norm);
        student.pe.store.clip_grad_norm(cfg.max_grad_norm);
        student.ce.store.adam_step(&adam);
        student.pe.store.adam_step(&adam);
        if episode % cfg.eval_every == 0 || episode == cfg.episodes {
            last = evaluate_student(&mut student, memory, &split.heldout)?;
            let row = DistillMetrics {
                episode,
                train_loss: e.total(),
                heldout_action_mse: last.action_mse,
                heldout_h_mse: last.h_mse,
            };
            on_eval(&row);
            metrics.push(row);
        }
    }
    Ok(StudentOutcome {
        student,
        initial,
        last,
        metrics,
    })
}
