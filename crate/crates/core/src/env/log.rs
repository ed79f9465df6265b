//! Per-step trajectory CSV.

use std::io::Write;

use super::{StepResult, WorldState};

pub fn trajectory_header(n_max: usize) -> String {
    let mut cols = vec!["t".to_string()];
    for i in 0..n_max {
        for f in ["x", "y", "vx", "vy", "active"] {
            cols.push(format!("a{i}_{f}"));
        }
    }
    cols.extend(["r_f", "r_v", "r_c", "r"].map(String::from));
    cols.join(",")
}

pub fn trajectory_row(state: &WorldState, step: &StepResult) -> String {
    let mut cols = vec![state.t.to_string()];
    for a in &state.agents {
        cols.push(a.position.x.to_string());
        cols.push(a.position.y.to_string());
        cols.push(a.velocity.x.to_string());
        cols.push(a.velocity.y.to_string());
        cols.push(u8::from(a.active).to_string());
    }
    let c = step.components;
    for v in [c.r_f, c.r_v, c.r_c, step.reward] {
        cols.push(v.to_string());
    }
    cols.join(",")
}

/// Buffers trajectory rows and writes them with a header.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    rows: Vec<String>,
    n_max: usize,
}

impl TrajectoryLog {
    pub fn new(n_max: usize) -> Self {
        Self {
            rows: Vec::new(),
            n_max,
        }
    }

    pub fn record(&mut self, state: &WorldState, step: &StepResult) {
        self.rows.push(trajectory_row(state, step));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", trajectory_header(self.n_max))?;
        for r in &self.rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    }
}
