//! Run configuration: one serializable tree for every command, loaded from
//! TOML or JSON and patched with `--dotted.key value` overrides.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::consmac::NetConfig;
use crate::distill::DistillConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::mappo::TrainConfig;

/// Environment variable consulted for the default seed.
pub const SEED_VAR: &str = "FORMATION_LAB_SEED";

fn default_seed() -> u64 {
    std::env::var(SEED_VAR)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Cost evaluation: rounds per checkpoint.
    pub rounds: usize,
    /// Cost evaluation: formation counts as achieved below this distance (m).
    pub threshold: f64,
    /// Evaluate at this fleet size instead of the checkpoint's own.
    pub n: Option<usize>,
    /// Adaptive evaluation: total steps.
    pub steps: usize,
    /// Adaptive evaluation: one agent is removed every this many steps.
    pub drop_every: usize,
    /// Adaptive evaluation: a window recovers if its best metric is within
    /// this distance (m) of the previous window's best.
    pub recovery_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            threshold: 0.1,
            n: None,
            steps: 400,
            drop_every: 100,
            recovery_tolerance: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub inject_bug: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into `train.seed` and `distill.seed`.
    pub seed: u64,
    /// Parent of the per-run directories.
    pub output_dir: PathBuf,
    /// Input checkpoints: teachers for `distill` and `eval-cost`, the
    /// student for `eval-adaptive`.
    pub checkpoints: Vec<PathBuf>,
    /// Reuse an existing replay file instead of harvesting one.
    pub replay: Option<PathBuf>,
    /// Accept checkpoints whose tag does not match the command.
    pub force: bool,
    pub env: EnvConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: default_seed(),
            output_dir: PathBuf::from("runs"),
            checkpoints: Vec::new(),
            replay: None,
            force: false,
            env: EnvConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        };
        cfg.propagate_seed();
        cfg
    }
}

/// Short names accepted on the command line.
const ALIASES: &[(&str, &str)] = &[
    ("n", "env.n_active"),
    ("obs_radius", "env.delta_obs"),
    ("metric", "env.formation_metric"),
    ("mode", "train.mode"),
    ("episodes", "train.episodes"),
    ("width", "net.message_width"),
    ("checkpoint", "checkpoints"),
    ("out", "output_dir"),
];

impl RunConfig {
    /// Reads a `.toml` or `.json` file; missing fields take their defaults.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => {
                return Err(Error::Config(format!(
                    "{}: expected a .toml or .json file",
                    path.display()
                )))
            }
        };
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.distill.seed = self.seed;
    }

    /// Sets one field by dotted path (`train.lr`, `env.n_active`, ...) or
    /// alias. The value is read as JSON when it parses, otherwise as a
    /// string; list fields accept comma-separated strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim_start_matches('-').replace('-', "_");
        let path = ALIASES
            .iter()
            .find(|(a, _)| *a == key)
            .map_or(key.as_str(), |(_, full)| full);
        let mut tree = serde_json::to_value(&*self)?;
        let mut slot = &mut tree;
        for part in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
        }
        let parsed = serde_json::from_str::<Value>(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *slot = match (&*slot, parsed) {
            (Value::Array(_), Value::String(s)) => {
                Value::Array(s.split(',').filter(|p| !p.is_empty()).map(|p| Value::String(p.into())).collect())
            }
            (_, v) => v,
        };
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
        if path == "seed" {
            self.propagate_seed();
        }
        Ok(())
    }

    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.net.attention()?;
        self.train.validate()?;
        self.distill.validate()?;
        if self.eval.rounds == 0 || self.eval.drop_every == 0 {
            return Err(Error::Config("eval.rounds and eval.drop_every must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Stable hex digest of the serialized configuration.
    pub fn hash(&self) -> String {
        let mut h = DefaultHasher::new();
        serde_json::to_string(self).unwrap_or_default().hash(&mut h);
        format!("{:016x}", h.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consmac::CommMode;
    use crate::env::FormationMetric;

    #[test]
    fn overrides_and_aliases() {
        let mut c = RunConfig::default();
        c.apply_overrides([
            ("--n", "7"),
            ("--obs-radius", "5"),
            ("train.lr", "3e-4"),
            ("mode", "no-comm"),
            ("metric", "ptp"),
            ("checkpoint", "a.bin,b.bin"),
            ("seed", "9"),
            ("force", "true"),
        ])
        .unwrap();
        assert_eq!(c.env.n_active, 7);
        assert_eq!(c.env.delta_obs, 5.0);
        assert_eq!(c.train.lr, 3e-4);
        assert_eq!(c.train.mode, CommMode::NoComm);
        assert_eq!(c.env.formation_metric, FormationMetric::Ptp);
        assert_eq!(c.checkpoints, vec![PathBuf::from("a.bin"), PathBuf::from("b.bin")]);
        assert_eq!((c.seed, c.train.seed, c.distill.seed), (9, 9, 9));
        assert!(c.force);
        assert!(c.to_json().unwrap().contains("\"delta_obs\": 5.0"));

        assert!(matches!(c.set("env.nope", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("train.epochs", "many"), Err(Error::Config(_))));
    }

    #[test]
    fn file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 4\n[env]\nn_active = 6\n[train]\nepisodes = 12\n").unwrap();
        let c = RunConfig::from_path(&t).unwrap();
        assert_eq!((c.seed, c.train.seed, c.env.n_active, c.train.episodes), (4, 4, 6, 12));
        assert_eq!(c.net, NetConfig::default());

        let j = dir.path().join("c.json");
        std::fs::write(&j, c.to_json().unwrap()).unwrap();
        assert_eq!(RunConfig::from_path(&j).unwrap(), c);
        assert_eq!(RunConfig::from_path(&j).unwrap().hash(), c.hash());

        let bad = dir.path().join("c.toml");
        std::fs::write(&bad, "sede = 4\n").unwrap();
        assert!(matches!(RunConfig::from_path(&bad), Err(Error::Config(_))));
    }
}
