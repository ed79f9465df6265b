//! Formation lab: decentralized adaptive swarm formation with
//! consensus-oriented communication.
//!
//! The pieces, bottom-up:
//!
//! * [`geometry`]: Hausdorff distances and per-fleet-size formation templates.
//! * [`env`]: the partially observable point-mass world and its shared reward.
//! * [`nn`]: parameter stores, layers with explicit backward passes, Adam.
//! * [`consmac`]: the consensus (attention + global estimator) and policy
//!   execution networks.
//! * [`mappo`]: rollouts, GAE and the clipped PPO update with the consensus
//!   loss kept on its own parameters.
//! * [`distill`]: replay harvesting from per-size teachers and student
//!   training.
//! * [`eval`], [`checkpoint`], [`config`], [`commands`]: evaluation protocols
//!   and the command-line plumbing.

pub mod error;
pub mod env;
pub mod geometry;
pub mod mappo;
pub mod consmac;
pub mod distill;
pub mod nn;
pub mod checkpoint;
pub mod gradients;
pub mod config;
pub mod eval;
pub mod commands;

pub use error::{Error, Result};

/// Smallest fleet with a formation template.
pub const N_MIN: usize = 5;
/// Number of agent slots; observation and message layouts are padded to it.
pub const N_MAX: usize = 8;
