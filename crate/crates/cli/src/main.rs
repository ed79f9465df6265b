use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use formation_lab::commands::{cmd_distill, cmd_eval_adaptive, cmd_eval_cost, cmd_gradcheck, cmd_train};
use formation_lab::config::RunConfig;

/// Swarm formation with consensus-oriented communication.
#[derive(Parser)]
#[command(name = "formation-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one per-size teacher (`--n 5..8`).
    Train(Common),
    /// Harvest teacher replay and distill a size-agnostic student.
    Distill(Common),
    /// Formation cost table for teacher checkpoints.
    EvalCost(Common),
    /// Agent-removal evaluation of a student checkpoint.
    EvalAdaptive(Common),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--dotted.key value`, `--key=value` or a bare `--flag`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter().peekable();
    while let Some(tok) = it.next() {
        let Some(key) = tok.strip_prefix("--") else {
            bail!("expected --key, found {tok:?}");
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        match it.peek() {
            Some(v) if !v.starts_with("--") => out.push((key.to_string(), it.next().cloned().unwrap_or_default())),
            _ => out.push((key.to_string(), "true".to_string())),
        }
    }
    Ok(out)
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut pairs = parse_overrides(&common.overrides)?;
    // `--config` may also appear among the overrides
    let mut config = common.config.clone();
    if let Some(i) = pairs.iter().position(|(k, _)| k == "config") {
        config = Some(PathBuf::from(pairs.remove(i).1));
    }
    let mut cfg = match &config {
        Some(p) => RunConfig::from_path(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    Ok(cfg)
}

type Runner = fn(&RunConfig) -> formation_lab::Result<PathBuf>;

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (run, common) = match &cli.command {
        Command::Train(c) => (cmd_train as Runner, c),
        Command::Distill(c) => (cmd_distill as Runner, c),
        Command::EvalCost(c) => (cmd_eval_cost as Runner, c),
        Command::EvalAdaptive(c) => (cmd_eval_adaptive as Runner, c),
        Command::Gradcheck(c) => (cmd_gradcheck as Runner, c),
    };
    let cfg = load(common)?;
    let dir = run(&cfg)?;
    println!("run directory: {}", dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn override_tokens() {
        let p = parse_overrides(&toks("--n 7 --force --train.lr=1e-3 --x -1")).unwrap();
        let want = [("n", "7"), ("force", "true"), ("train.lr", "1e-3"), ("x", "-1")];
        assert_eq!(p.len(), want.len());
        for ((k, v), (wk, wv)) in p.iter().zip(want) {
            assert_eq!((k.as_str(), v.as_str()), (wk, wv));
        }
        assert!(parse_overrides(&toks("stray")).is_err());
    }
}
