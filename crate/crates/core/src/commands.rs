//! The command implementations behind the CLI. Each command writes a run
//! directory `<output_dir>/<timestamp>-<command>/` holding `config.json`,
//! `metrics.csv`, `log.txt` and, when it produces a model, `checkpoint.bin`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{Checkpoint, CheckpointMeta, CheckpointTag};
use crate::config::RunConfig;
use crate::consmac::CommMode;
use crate::distill::{collect_replay, train_student, DistillMetrics, ReplayMemory};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::{
    adaptive_evaluation, cost_evaluation, cost_rounds_csv, cost_table, never_achieved_table, window_summaries,
    windows_csv,
};
use crate::gradients::{gradient_suite, SuiteOptions};
use crate::mappo::{train_teacher, trainer::greedy_distances, EpisodeMetrics, TeacherModel};

/// An open run directory with its log.
pub struct RunDir {
    pub path: PathBuf,
    log: BufWriter<File>,
}

impl RunDir {
    /// Creates `<root>/<timestamp>-<command>`, adding a numeric suffix when
    /// the name is taken, and writes `config.json`.
    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let root = &cfg.output_dir;
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut path = root.join(format!("{stamp}-{command}"));
        let mut k = 1;
        while path.exists() {
            path = root.join(format!("{stamp}-{command}-{k}"));
            k += 1;
        }
        std::fs::create_dir(&path).map_err(|e| Error::io(&path, e))?;
        write_file(&path.join("config.json"), &cfg.to_json()?)?;
        let log_path = path.join("log.txt");
        let log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
        Ok(Self { path, log })
    }

    pub fn log(&mut self, line: impl AsRef<str>) -> Result<()> {
        let line = line.as_ref();
        println!("{line}");
        let p = self.path.join("log.txt");
        writeln!(self.log, "{line}").and_then(|_| self.log.flush()).map_err(|e| Error::io(p, e))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        write_file(&self.file(name), contents)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Streams CSV rows to a file.
struct CsvSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvSink {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut s = Self {
            out: BufWriter::new(f),
            path,
        };
        s.row(header)?;
        Ok(s)
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn meta(cfg: &RunConfig, tag: CheckpointTag, env: &EnvConfig, mode: CommMode) -> CheckpointMeta {
    CheckpointMeta {
        tag,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        created: chrono::Utc::now().to_rfc3339(),
        mode,
        net: cfg.net.clone(),
        env: env.clone(),
        value_norm: None,
    }
}

/// Trains one teacher for `env.n_active` agents.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let mut run = RunDir::create(cfg, "train")?;
    let (n, mode) = (cfg.env.n_active, cfg.train.mode);
    run.log(format!(
        "training n={n} mode={} episodes={} seed={} width={}",
        mode.as_str(),
        cfg.train.episodes,
        cfg.seed,
        cfg.net.message_width
    ))?;
    let mut sink = CsvSink::create(run.file("metrics.csv"), EpisodeMetrics::CSV_HEADER)?;
    let mut sink_err = None;
    let mut progress = Vec::new();
    let every = (cfg.train.episodes / 20).max(1);
    let outcome = train_teacher(&cfg.env, &cfg.net, &cfg.train, |m| {
        if let Err(e) = sink.row(&m.csv_row()) {
            sink_err.get_or_insert(e);
        }
        if m.episode % every == 0 || m.episode + 1 == cfg.train.episodes {
            progress.push(format!(
                "episode {:>6}  reward {:>10.3}  r_f {:>8.3}  r_v {:>8.3}  hd {:.3} -> {:.3}  sigma {:.3}",
                m.episode, m.mean_reward, m.r_f, m.r_v, m.initial_distance, m.final_distance, m.sigma
            ));
        }
    });
    sink.finish()?;
    for line in progress {
        run.log(line)?;
    }
    if let Some(e) = sink_err {
        return Err(e);
    }
    let outcome = outcome?;
    if mode == CommMode::NoComm {
        let max = outcome.metrics.iter().map(|m| m.max_abs_message).fold(0.0, f64::max);
        run.log(format!("no-comm: max |message| over training = {max}"))?;
    }
    let seeds: Vec<u64> = (0..10).map(|k| cfg.seed.wrapping_mul(1000).wrapping_add(k)).collect();
    let d = greedy_distances(&cfg.env, &outcome.model, mode, &seeds)?;
    let mean_final = d.iter().map(|x| x.1).sum::<f64>() / d.len() as f64;
    run.log(format!("greedy final formation distance over 10 episodes: {mean_final:.4}"))?;
    Checkpoint::from_teacher(&outcome.model, meta(cfg, CheckpointTag::Teacher { n }, &cfg.env, mode))
        .save(&run.file("checkpoint.bin"))?;
    run.log(format!("wrote {}", run.path.display()))?;
    Ok(run.path)
}

fn load_teachers(cfg: &RunConfig, run: &mut RunDir) -> Result<(BTreeMap<usize, TeacherModel>, CommMode)> {
    let mut teachers = BTreeMap::new();
    let mut mode = CommMode::ConsMac;
    for p in &cfg.checkpoints {
        let ck = Checkpoint::load(p)?;
        let CheckpointTag::Teacher { n } = ck.meta.tag else {
            return Err(Error::CheckpointTag {
                found: ck.meta.tag.to_string(),
                expected: "a teacher".into(),
            });
        };
        if ck.meta.net != cfg.net {
            return Err(Error::Config(format!(
                "{}: teacher network {:?} differs from net {:?}",
                p.display(),
                ck.meta.net,
                cfg.net
            )));
        }
        run.log(format!("teacher n={n} from {}", p.display()))?;
        mode = ck.meta.mode;
        teachers.insert(n, ck.to_teacher()?);
    }
    Ok((teachers, mode))
}

/// Harvests replay from the teacher checkpoints (or loads `replay`) and
/// distills one size-agnostic student.
pub fn cmd_distill(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let mut run = RunDir::create(cfg, "distill")?;
    let memory = match &cfg.replay {
        Some(p) => {
            run.log(format!("loading replay {}", p.display()))?;
            ReplayMemory::load(p)?
        }
        None => {
            let (teachers, mode) = load_teachers(cfg, &mut run)?;
            let m = collect_replay(&teachers, &cfg.env, mode, cfg.distill.steps_per_teacher, cfg.seed)?;
            m.save(&run.file("replay.bin"))?;
            m
        }
    };
    run.log(format!("replay: {} tuples, per teacher {:?}", memory.len(), memory.histogram()))?;
    let mut sink = CsvSink::create(run.file("metrics.csv"), DistillMetrics::CSV_HEADER)?;
    let mut sink_err = None;
    let outcome = train_student(&memory, &cfg.net, cfg.env.u_range, &cfg.distill, |m| {
        if let Err(e) = sink.row(&m.csv_row()) {
            sink_err.get_or_insert(e);
        }
    });
    sink.finish()?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    let outcome = outcome?;
    run.log(format!(
        "held-out action mse {:.5} -> {:.5}, consensus mse {:.5} -> {:.5}",
        outcome.initial.action_mse, outcome.last.action_mse, outcome.initial.h_mse, outcome.last.h_mse
    ))?;
    Checkpoint::from_student(
        &outcome.student,
        meta(cfg, CheckpointTag::Student, &cfg.env, CommMode::ConsMac),
    )
    .save(&run.file("checkpoint.bin"))?;
    run.log(format!("wrote {}", run.path.display()))?;
    Ok(run.path)
}

/// Formation cost of each teacher checkpoint; writes `cost_table.csv`,
/// `never_achieved.csv` and per-round `metrics.csv`.
pub fn cmd_eval_cost(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    if cfg.checkpoints.is_empty() {
        return Err(Error::Config("eval-cost needs at least one checkpoint".into()));
    }
    let mut run = RunDir::create(cfg, "eval-cost")?;
    let mut summaries = Vec::new();
    for p in &cfg.checkpoints {
        let ck = Checkpoint::load(p)?;
        let own = match ck.meta.tag {
            CheckpointTag::Teacher { n } => n,
            CheckpointTag::Student => cfg.eval.n.unwrap_or(cfg.env.n_active),
        };
        let n = cfg.eval.n.unwrap_or(own);
        ck.require_tag(CheckpointTag::Teacher { n }, cfg.force)?;
        let policy = ck.to_policy()?;
        let env = EnvConfig {
            n_active: n,
            ..ck.meta.env.clone()
        };
        let s = cost_evaluation(&policy, ck.meta.mode, &env, &cfg.eval, cfg.seed)?;
        run.log(format!(
            "{} n={n}: achieved {}/{} rounds",
            p.display(),
            s.achieved().count(),
            s.rounds.len()
        ))?;
        summaries.push(s);
    }
    let table = cost_table(&summaries, cfg.env.dt);
    let never = never_achieved_table(&summaries);
    run.write("cost_table.csv", &table)?;
    run.write("never_achieved.csv", &never)?;
    run.write("metrics.csv", &cost_rounds_csv(&summaries))?;
    run.log(table.trim_end())?;
    run.log(never.trim_end())?;
    Ok(run.path)
}

/// Runs the student through the agent-removal schedule; writes the per-step
/// `metrics.csv` and `windows.csv`.
pub fn cmd_eval_adaptive(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let [p] = cfg.checkpoints.as_slice() else {
        return Err(Error::Config("eval-adaptive needs exactly one checkpoint".into()));
    };
    let ck = Checkpoint::load(p)?;
    ck.require_tag(CheckpointTag::Student, cfg.force)?;
    let mut run = RunDir::create(cfg, "eval-adaptive")?;
    let policy = ck.to_policy()?;
    let mode = if ck.meta.mode == CommMode::NoComm {
        CommMode::NoComm
    } else {
        CommMode::ConsMac
    };
    let result = adaptive_evaluation(&policy, mode, &ck.meta.env, &cfg.eval, cfg.seed)?;
    run.write("metrics.csv", &result.csv())?;
    let windows = window_summaries(&result, cfg.eval.drop_every, cfg.eval.recovery_tolerance);
    run.write("windows.csv", &windows_csv(&windows))?;
    for (t, agent) in &result.removals {
        run.log(format!("step {t}: removed agent {agent}"))?;
    }
    for w in &windows {
        run.log(format!(
            "window from {:>3} (n={}): start {:.3}, best {:.3}, recovered {}, improved {}",
            w.start, w.n_active, w.start_value, w.best, w.recovered, w.improved
        ))?;
    }
    Ok(run.path)
}

/// Runs the gradient suite; fails if any check fails.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<PathBuf> {
    let mut run = RunDir::create(cfg, "gradcheck")?;
    let reports = gradient_suite(&SuiteOptions {
        seed: cfg.seed,
        inject_bug: cfg.gradcheck.inject_bug,
        ..SuiteOptions::default()
    })?;
    let mut csv = String::from("check,passed,max_rel_error,tolerance\n");
    for r in &reports {
        run.log(r.to_string().trim_end())?;
        csv.push_str(&format!("{},{},{},{}\n", r.label, r.passed(), r.max_error(), r.tolerance));
    }
    run.write("metrics.csv", &csv)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.label.as_str()).collect();
    if !failed.is_empty() {
        return Err(Error::GradientCheck(failed.join(", ")));
    }
    Ok(run.path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consmac::NetConfig;

    fn tiny(dir: &Path) -> RunConfig {
        let mut c = RunConfig {
            output_dir: dir.to_path_buf(),
            seed: 5,
            net: NetConfig {
                message_width: 6,
                hidden_width: 8,
                heads: 2,
            },
            ..RunConfig::default()
        };
        c.env.episode_length = 10;
        c.train.episodes = 3;
        c.train.epochs = 2;
        c.distill.steps_per_teacher = 20;
        c.distill.episodes = 5;
        c.distill.batch_size = 16;
        c.distill.eval_every = 2;
        c.eval.rounds = 2;
        c.eval.steps = 40;
        c.eval.drop_every = 10;
        c.propagate_seed();
        c
    }

    #[test]
    fn full_pipeline_and_tag_gate() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        let mut teachers = Vec::new();
        for n in 5..=8 {
            cfg.env.n_active = n;
            let run = cmd_train(&cfg).unwrap();
            for f in ["config.json", "metrics.csv", "checkpoint.bin", "log.txt"] {
                assert!(run.join(f).exists(), "{f}");
            }
            teachers.push(run.join("checkpoint.bin"));
        }
        cfg.env.n_active = 5;
        cfg.checkpoints = teachers.clone();
        let student = cmd_distill(&cfg).unwrap().join("checkpoint.bin");

        cfg.checkpoints = teachers.clone();
        let cost = cmd_eval_cost(&cfg).unwrap();
        let table = std::fs::read_to_string(cost.join("cost_table.csv")).unwrap();
        assert_eq!(table.lines().next().unwrap(), "metric,quantity,n5,n6,n7,n8");

        cfg.checkpoints = vec![student.clone()];
        let adaptive = cmd_eval_adaptive(&cfg).unwrap();
        assert_eq!(std::fs::read_to_string(adaptive.join("metrics.csv")).unwrap().lines().count(), 41);

        // a teacher cannot stand in for the student, nor an n=5 teacher for n=7
        cfg.checkpoints = vec![teachers[0].clone()];
        assert!(matches!(cmd_eval_adaptive(&cfg), Err(Error::CheckpointTag { .. })));
        cfg.eval.n = Some(7);
        assert!(matches!(cmd_eval_cost(&cfg), Err(Error::CheckpointTag { .. })));
        cfg.force = true;
        assert!(cmd_eval_cost(&cfg).is_ok());
    }

    #[test]
    fn training_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let a = cmd_train(&cfg).unwrap();
        let b = cmd_train(&cfg).unwrap();
        assert_ne!(a, b);
        let read = |p: &Path| std::fs::read(p.join("metrics.csv")).unwrap();
        assert_eq!(read(&a), read(&b));
    }

    #[test]
    fn gradcheck_command() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        assert!(cmd_gradcheck(&cfg).is_ok());
        cfg.gradcheck.inject_bug = true;
        assert!(matches!(cmd_gradcheck(&cfg), Err(Error::GradientCheck(_))));
    }
}
