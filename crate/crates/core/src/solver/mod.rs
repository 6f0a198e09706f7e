//! Embedded branch and bound over a simplex relaxation, plus MPS export.

mod bnb;
mod mps;
mod simplex;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MilpModel;

pub use mps::{export_mps, write_mps};
pub use simplex::{solve_lp, LpSolution, LpStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeSelection {
    BestBound,
    DepthFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    MostFractional,
    FirstFractional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Wall-clock limit in seconds.
    pub time_limit: Option<f64>,
    /// Stop once the relative gap (percent) is at most this.
    pub gap_tolerance: f64,
    pub integrality_tolerance: f64,
    pub node_selection: NodeSelection,
    pub branching: Branching,
    pub seed: u64,
    pub threads: usize,
    /// Cap on processed nodes, for reproducible budgets.
    pub node_limit: Option<u64>,
    /// Stream incumbent and bound events here as JSON lines.
    pub log_path: Option<PathBuf>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            time_limit: None,
            gap_tolerance: 0.0,
            integrality_tolerance: 1e-6,
            node_selection: NodeSelection::BestBound,
            branching: Branching::MostFractional,
            seed: 0,
            threads: 1,
            node_limit: None,
            log_path: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.time_limit {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("time limit must be positive, got {t}")));
            }
        }
        if !(self.gap_tolerance >= 0.0 && self.gap_tolerance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gap tolerance must be a nonnegative percentage, got {}",
                self.gap_tolerance
            )));
        }
        if !(self.integrality_tolerance > 0.0 && self.integrality_tolerance < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "integrality tolerance must lie in (0, 0.5), got {}",
                self.integrality_tolerance
            )));
        }
        if self.threads == 0 {
            return Err(Error::InvalidArgument("at least one thread is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Proven optimal within the gap tolerance.
    Optimal,
    /// Stopped at a limit with an incumbent and a remaining gap.
    Feasible,
    Infeasible,
    Unbounded,
    /// Stopped at a limit before any incumbent was found.
    TimeLimitNoIncumbent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Incumbent,
    Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverEvent {
    pub kind: EventKind,
    /// Seconds since the start of the solve.
    pub time: f64,
    pub nodes: u64,
    pub objective: Option<f64>,
    pub best_bound: f64,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: Status,
    pub incumbent: Option<Vec<f64>>,
    /// Incumbent objective, `+inf` without one.
    pub objective: f64,
    pub best_bound: f64,
    /// Percent gap, present with an incumbent.
    pub gap: Option<f64>,
    pub nodes: u64,
    pub lp_iterations: u64,
    pub wall_time: f64,
    pub events: Vec<SolverEvent>,
}

/// `100 (objective - bound) / max(|objective|, 1e-10)`.
pub fn relative_gap(objective: f64, bound: f64) -> f64 {
    (100.0 * (objective - bound) / objective.abs().max(1e-10)).max(0.0)
}

/// Minimizes `model` by branch and bound.
pub fn solve(model: &MilpModel, config: &SolverConfig) -> Result<SolveResult> {
    check(model, config)?;
    bnb::branch_and_bound(model, config, None)
}

/// Like [`solve`], with `start` as the first incumbent when it is feasible.
/// An infeasible start is ignored with a warning.
pub fn solve_with_start(model: &MilpModel, config: &SolverConfig, start: &[f64]) -> Result<SolveResult> {
    check(model, config)?;
    if start.len() != model.num_vars() {
        return Err(Error::DimensionMismatch {
            expected: model.num_vars(),
            got: start.len(),
        });
    }
    bnb::branch_and_bound(model, config, Some(start))
}

fn check(model: &MilpModel, config: &SolverConfig) -> Result<()> {
    config.validate()?;
    model.validate()?;
    if !model.cones.is_empty() {
        return Err(Error::Unsupported(
            "the model has second-order cone rows; export it to MPS for a cone-capable solver".into(),
        ));
    }
    Ok(())
}
