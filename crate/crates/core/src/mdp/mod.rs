//! Finite-state approximation of the scheduling problem and its dynamic programs.

mod bounds;
mod grid;
mod kdtree;
mod policy;
mod solve;

pub use bounds::{fit_drift_constants, DriftConstants};
pub use grid::{default_r_max, lossless_steady_trace, GridOptions, StateGrid, MIN_SEPARATION};
pub use policy::{evaluate_policy_cost, greedy_query, rolling_horizon_policy, Heuristic, SchedulingPolicy, TablePolicy};
pub use solve::{
    average_cost_bellman, discounted_vi, evaluate_decisions, finite_horizon_dp, rvi, rvi_step, rvi_with, stage_costs,
    vi_step, Bellman, RviOptions, ValueTable, RVI_MAX_ITER, RVI_TOL,
};
