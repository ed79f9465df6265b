use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the formation lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point set must be non-empty")]
    EmptyPointSet,

    #[error("agent count {n} outside [{min}, {max}]")]
    AgentCountOutOfRange { n: usize, min: usize, max: usize },

    #[error("size mismatch: expected {expected}, got {got} ({what})")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("agent {0} is not active")]
    InactiveAgent(usize),

    #[error("invalid value for {what}: {value}")]
    InvalidValue { what: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite {what} at episode {episode}: {detail}")]
    Diverged {
        what: &'static str,
        episode: usize,
        detail: String,
    },

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch for {name}: file has {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("checkpoint tagged {found} cannot be used for {expected} (pass --force to override)")]
    CheckpointTag { found: String, expected: String },

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error("missing teacher for n = {0}")]
    MissingTeacher(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
