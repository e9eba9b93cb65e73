//! JSON artifacts written by the subcommands.

use netsched::mdp::{SchedulingPolicy, StateGrid, ValueTable};
use netsched::model::AssumptionReport;
use netsched::riccati::RiccatiSolution;
use netsched::sim::CostEstimate;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub states: usize,
    pub r_max: f64,
    pub resolution: f64,
    /// Largest distance from a successor to the grid point it was projected on.
    pub max_projection: f64,
}

impl GridSummary {
    pub fn of(g: &StateGrid) -> Self {
        Self { states: g.len(), r_max: g.r_max(), resolution: g.resolution(), max_projection: g.max_projection() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Average,
    Discounted,
    Finite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveArtifact {
    pub mode: SolveMode,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    pub grid: GridSummary,
    pub table: ValueTable,
    pub policy: SchedulingPolicy,
}

/// Cost-to-go tables for every stage of a finite-horizon problem; entry `t` starts at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteArtifact {
    pub horizon: usize,
    pub alpha: f64,
    pub grid: GridSummary,
    pub stages: Vec<ValueTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub policy: String,
    pub horizon: usize,
    pub seed: u64,
    pub estimate: CostEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub state_dim: usize,
    pub input_dim: usize,
    pub noise_dim: usize,
    pub queries: usize,
    pub network_states: usize,
    pub assumptions: AssumptionReport,
    /// Minorization constant when certified.
    pub minorization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minorization_failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_r_max: Option<f64>,
}

pub type RiccatiArtifact = RiccatiSolution;
