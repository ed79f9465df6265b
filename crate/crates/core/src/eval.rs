//! Evaluation protocols: formation cost (distance travelled and time until the
//! formation is reached) and adaptive formation under agent removal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::consmac::{CommMode, ConsMacPolicy, LocalBatch};
use crate::env::{EnvConfig, FormationMetric, StepResult, SwarmEnv};
use crate::error::{Error, Result};
use crate::geometry::euclidean_distance;
use crate::{N_MAX, N_MIN};

/// One deterministic step (`u = mu`) of every active agent.
pub fn greedy_step(env: &mut SwarmEnv, policy: &ConsMacPolicy, mode: CommMode) -> Result<StepResult> {
    let states = env.local_states()?;
    let batch = LocalBatch::from_local_states(&states, policy.net.message_width)?;
    let step = policy.act(&batch, mode)?;
    let actions: Vec<[f64; 2]> = step.execution.mu.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let messages = step.broadcast.rows().into_iter().map(|r| r.to_vec()).collect();
    env.step(&actions, messages)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRound {
    pub seed: u64,
    /// Step after which the formation distance first fell below the
    /// threshold (0 if it started there).
    pub achieved_step: Option<usize>,
    /// Mean per-agent path length (m) up to achievement, or over the whole
    /// episode when never achieved.
    pub path_length: f64,
    pub initial_distance: f64,
    pub final_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub n: usize,
    pub metric: FormationMetric,
    pub rounds: Vec<CostRound>,
}

impl CostSummary {
    pub fn achieved(&self) -> impl Iterator<Item = &CostRound> {
        self.rounds.iter().filter(|r| r.achieved_step.is_some())
    }

    pub fn never_achieved(&self) -> usize {
        self.rounds.len() - self.achieved().count()
    }

    /// Mean path length over achieved rounds.
    pub fn mean_distance(&self) -> Option<f64> {
        mean(self.achieved().map(|r| r.path_length))
    }

    /// Mean time to formation over achieved rounds, in seconds.
    pub fn mean_time(&self, dt: f64) -> Option<f64> {
        mean(self.achieved().filter_map(|r| r.achieved_step).map(|s| s as f64 * dt))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, c) = it.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    (c > 0).then(|| s / c as f64)
}

fn cost_round(
    policy: &ConsMacPolicy,
    mode: CommMode,
    env_cfg: &EnvConfig,
    threshold: f64,
    round_seed: u64,
) -> Result<CostRound> {
    let mut env = SwarmEnv::new(env_cfg.clone(), policy.net.message_width, round_seed)?;
    let initial = env.formation_distance()?;
    let mut achieved = (initial < threshold).then_some(0);
    let mut travelled = 0.0;
    let n = env.state().n_active() as f64;
    while achieved.is_none() && !env.done() {
        let before = env.state().active_positions();
        greedy_step(&mut env, policy, mode)?;
        let after = env.state().active_positions();
        travelled += before.iter().zip(&after).map(|(a, b)| euclidean_distance(*a, *b)).sum::<f64>() / n;
        if env.formation_distance()? < threshold {
            achieved = Some(env.state().t);
        }
    }
    Ok(CostRound {
        seed: round_seed,
        achieved_step: achieved,
        path_length: travelled,
        initial_distance: initial,
        final_distance: env.formation_distance()?,
    })
}

/// Runs `cfg.rounds` greedy episodes of `env_cfg.episode_length` steps,
/// spread over the available cores. Round seeds are drawn up front, so the
/// result does not depend on the thread count. Achievement is judged on the
/// Hausdorff formation distance whatever metric the policy was trained with.
pub fn cost_evaluation(
    policy: &ConsMacPolicy,
    mode: CommMode,
    env_cfg: &EnvConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<CostSummary> {
    env_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..cfg.rounds).map(|_| rng.random()).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(threads).max(1);
    let rounds: Result<Vec<Vec<CostRound>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&s| cost_round(policy, mode, env_cfg, cfg.threshold, s))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    Ok(CostSummary {
        n: env_cfg.n_active,
        metric: env_cfg.formation_metric,
        rounds: rounds?.into_iter().flatten().collect(),
    })
}

pub const COST_ROUNDS_HEADER: &str = "metric,n,seed,achieved_step,path_length,initial_hd,final_hd";

pub fn cost_rounds_csv(summaries: &[CostSummary]) -> String {
    let mut out = format!("{COST_ROUNDS_HEADER}\n");
    for s in summaries {
        for r in &s.rounds {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                metric_name(s.metric),
                s.n,
                r.seed,
                r.achieved_step.map_or(String::new(), |t| t.to_string()),
                r.path_length,
                r.initial_distance,
                r.final_distance
            ));
        }
    }
    out
}

fn metric_name(m: FormationMetric) -> &'static str {
    match m {
        FormationMetric::Hd => "hd",
        FormationMetric::Ptp => "ptp",
    }
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn find(summaries: &[CostSummary], metric: FormationMetric, n: usize) -> Option<&CostSummary> {
    summaries.iter().find(|s| s.metric == metric && s.n == n)
}

/// Cost table: rows `(metric, distance_m | time_s)`, columns `n5..n8`. Cells
/// with no checkpoint or no achieved round are `-`.
pub fn cost_table(summaries: &[CostSummary], dt: f64) -> String {
    let ns: Vec<usize> = (N_MIN..=N_MAX).collect();
    let mut out = String::from("metric,quantity");
    for n in &ns {
        out.push_str(&format!(",n{n}"));
    }
    out.push('\n');
    for metric in [FormationMetric::Hd, FormationMetric::Ptp] {
        for (q, f) in [
            ("distance_m", &(|s: &CostSummary| s.mean_distance()) as &dyn Fn(&CostSummary) -> Option<f64>),
            ("time_s", &|s: &CostSummary| s.mean_time(dt)),
        ] {
            out.push_str(&format!("{},{q}", metric_name(metric)));
            for &n in &ns {
                let v = find(summaries, metric, n).and_then(f).map(|v| format!("{v:.3}"));
                out.push_str(&format!(",{}", cell(v)));
            }
            out.push('\n');
        }
    }
    out
}

/// Never-achieved round counts, same layout as [`cost_table`].
pub fn never_achieved_table(summaries: &[CostSummary]) -> String {
    let mut out = String::from("metric,rounds");
    for n in N_MIN..=N_MAX {
        out.push_str(&format!(",n{n}"));
    }
    out.push('\n');
    for metric in [FormationMetric::Hd, FormationMetric::Ptp] {
        out.push_str(&format!("{},never_achieved", metric_name(metric)));
        for n in N_MIN..=N_MAX {
            out.push_str(&format!(",{}", cell(find(summaries, metric, n).map(|s| s.never_achieved()))));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveStep {
    pub t: usize,
    pub n_active: usize,
    /// Negated Hausdorff distance to the current template, after the step.
    pub neg_hd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRun {
    pub steps: Vec<AdaptiveStep>,
    /// `(step, agent index)` of each removal.
    pub removals: Vec<(usize, usize)>,
}

pub const ADAPTIVE_HEADER: &str = "t,n_active,neg_hd";

impl AdaptiveRun {
    pub fn csv(&self) -> String {
        let mut out = format!("{ADAPTIVE_HEADER}\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{}\n", s.t, s.n_active, s.neg_hd));
        }
        out
    }
}

/// Starts `N_MAX` agents and removes a random active one every
/// `cfg.drop_every` steps (never going below `N_MIN`). Only active agents are
/// observed and queried.
pub fn adaptive_evaluation(
    policy: &ConsMacPolicy,
    mode: CommMode,
    base: &EnvConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<AdaptiveRun> {
    let env_cfg = EnvConfig {
        n_active: N_MAX,
        episode_length: cfg.steps,
        ..base.clone()
    };
    let mut env = SwarmEnv::new(env_cfg, policy.net.message_width, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada7);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut removals = Vec::new();
    for t in 0..cfg.steps {
        if t > 0 && t % cfg.drop_every == 0 && env.state().n_active() > N_MIN {
            let active = env.state().active_indices();
            let victim = active[rng.random_range(0..active.len())];
            env.deactivate_agent(victim)?;
            removals.push((t, victim));
        }
        let r = greedy_step(&mut env, policy, mode)?;
        if r.local_states.len() != env.state().n_active() {
            return Err(Error::SizeMismatch {
                what: "local states per active agent",
                expected: env.state().n_active(),
                got: r.local_states.len(),
            });
        }
        steps.push(AdaptiveStep {
            t,
            n_active: env.state().n_active(),
            neg_hd: -env.formation_distance()?,
        });
    }
    Ok(AdaptiveRun { steps, removals })
}

/// Per-window view of an adaptive run: a window starts at 0 and at each
/// removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub start: usize,
    pub n_active: usize,
    pub start_value: f64,
    pub best: f64,
    /// Best value in the previous window.
    pub previous_best: Option<f64>,
    /// Best value within `tolerance` of the previous window's best.
    pub recovered: bool,
    /// Best value strictly above the value at the window's start.
    pub improved: bool,
}

pub fn window_summaries(run: &AdaptiveRun, drop_every: usize, tolerance: f64) -> Vec<WindowSummary> {
    let mut out: Vec<WindowSummary> = Vec::new();
    for chunk in run.steps.chunks(drop_every.max(1)) {
        let best = chunk.iter().map(|s| s.neg_hd).fold(f64::NEG_INFINITY, f64::max);
        let previous_best = out.last().map(|w| w.best);
        out.push(WindowSummary {
            start: chunk[0].t,
            n_active: chunk[0].n_active,
            start_value: chunk[0].neg_hd,
            best,
            previous_best,
            recovered: previous_best.is_none_or(|p| best >= p - tolerance),
            improved: best > chunk[0].neg_hd,
        });
    }
    out
}

pub const WINDOW_HEADER: &str = "start,n_active,start_value,best,previous_best,recovered,improved";

pub fn windows_csv(windows: &[WindowSummary]) -> String {
    let mut out = format!("{WINDOW_HEADER}\n");
    for w in windows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            w.start,
            w.n_active,
            w.start_value,
            w.best,
            cell(w.previous_best),
            w.recovered,
            w.improved
        ));
    }
    out
}
