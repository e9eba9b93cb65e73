//! Scheduling policies: table lookup over a grid, and simple heuristics.

use serde::{Deserialize, Serialize};

use super::grid::StateGrid;
use super::kdtree::{features, KdTree};
use super::solve::{average_cost_bellman, evaluate_decisions, Bellman, ValueTable};
use crate::error::{Error, Result};
use crate::kernel::apply_kernel;
use crate::model::SchedulingModel;
use crate::psd::CovMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    /// Query `t mod |Q|` at time `t`.
    RoundRobin,
    /// Query minimizing the expected trace of the next covariance.
    Greedy,
    /// Always the same query.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingPolicy {
    Table(TablePolicy),
    Heuristic(Heuristic),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableEntry {
    s: usize,
    cov: CovMatrix,
    query: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableRaw {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    horizon: Option<usize>,
    entries: Vec<TableEntry>,
}

/// Decisions attached to grid states; off-grid states use the nearest stored covariance
/// in the same network state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TableRaw", into = "TableRaw")]
pub struct TablePolicy {
    entries: Vec<TableEntry>,
    /// Value-iteration stage the table was read from, for rolling-horizon policies.
    horizon: Option<usize>,
    trees: Vec<KdTree>,
}

impl PartialEq for TablePolicy {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.horizon == other.horizon
    }
}

impl From<TablePolicy> for TableRaw {
    fn from(p: TablePolicy) -> Self {
        Self { horizon: p.horizon, entries: p.entries }
    }
}

impl TryFrom<TableRaw> for TablePolicy {
    type Error = Error;
    fn try_from(r: TableRaw) -> Result<Self> {
        Self::from_entries(r.entries, r.horizon)
    }
}

impl TablePolicy {
    fn from_entries(entries: Vec<TableEntry>, horizon: Option<usize>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::InvalidModel("policy table is empty".into()));
        };
        let d = first.cov.dim();
        if entries.iter().any(|e| e.cov.dim() != d) {
            return Err(Error::Dimension("policy table mixes covariance sizes".into()));
        }
        let n_net = entries.iter().map(|e| e.s).max().unwrap() + 1;
        let mut pts = vec![Vec::new(); n_net];
        for (i, e) in entries.iter().enumerate() {
            pts[e.s].push((i, features(&e.cov)));
        }
        if let Some(s) = pts.iter().position(Vec::is_empty) {
            return Err(Error::InvalidModel(format!("policy table has no entry for network state {s}")));
        }
        let f = d * (d + 1) / 2;
        let trees = pts.into_iter().map(|p| KdTree::build(f, p)).collect();
        Ok(Self { entries, horizon, trees })
    }

    pub fn from_grid(grid: &StateGrid, decisions: &[usize], horizon: Option<usize>) -> Result<Self> {
        if decisions.len() != grid.len() {
            return Err(Error::Dimension(format!("{} decisions for {} grid states", decisions.len(), grid.len())));
        }
        let entries = (0..grid.len())
            .map(|z| TableEntry { s: grid.net_state(z), cov: grid.cov(z).clone(), query: decisions[z] })
            .collect();
        Self::from_entries(entries, horizon)
    }

    pub fn horizon(&self) -> Option<usize> {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, s: usize, sigma: &CovMatrix) -> Result<usize> {
        let tree = self
            .trees
            .get(s)
            .ok_or_else(|| Error::Dimension(format!("network state {s} is not covered by the policy table")))?;
        if sigma.dim() != self.entries[0].cov.dim() {
            return Err(Error::Dimension(format!("covariance is {}x{0}, table holds {1}x{1}", sigma.dim(), self.entries[0].cov.dim())));
        }
        let (i, _) = tree.nearest(&features(sigma)).expect("tree is nonempty");
        Ok(self.entries[i].query)
    }
}

/// Query minimizing the one-step expected trace, ties to the lowest index.
pub fn greedy_query(model: &SchedulingModel, s: usize, sigma: &CovMatrix) -> Result<usize> {
    let mut best = (f64::INFINITY, 0);
    for q in 0..model.num_queries() {
        let v = apply_kernel(model, |_, c| Ok(c.trace()), s, sigma, q)?;
        if v < best.0 {
            best = (v, q);
        }
    }
    Ok(best.1)
}

impl SchedulingPolicy {
    /// Query at time `t` in network state `s` with error covariance `sigma`.
    pub fn query(&self, model: &SchedulingModel, t: usize, s: usize, sigma: &CovMatrix) -> Result<usize> {
        let q = match self {
            Self::Table(tp) => tp.lookup(s, sigma)?,
            Self::Heuristic(Heuristic::RoundRobin) => t % model.num_queries(),
            Self::Heuristic(Heuristic::Greedy) => greedy_query(model, s, sigma)?,
            Self::Heuristic(Heuristic::Fixed(q)) => *q,
        };
        if q >= model.num_queries() {
            return Err(Error::InvalidModel(format!("policy chose query {q} but the model has {}", model.num_queries())));
        }
        Ok(q)
    }

    /// Whether decisions depend on time.
    pub fn is_stationary(&self) -> bool {
        !matches!(self, Self::Heuristic(Heuristic::RoundRobin))
    }

    /// Decisions at every grid state for time `t`.
    pub fn decisions_on(&self, grid: &StateGrid, model: &SchedulingModel, t: usize) -> Result<Vec<usize>> {
        (0..grid.len()).map(|z| self.query(model, t, grid.net_state(z), grid.cov(z))).collect()
    }
}

/// Stationary policy read off the minimizer of a value-iteration stage.
pub fn rolling_horizon_policy(grid: &StateGrid, table: &ValueTable) -> Result<SchedulingPolicy> {
    if table.iterations == 0 {
        return Err(Error::InvalidModel("rolling-horizon policy needs at least one iteration".into()));
    }
    Ok(SchedulingPolicy::Table(TablePolicy::from_grid(grid, &table.minimizer, Some(table.iterations))?))
}

/// Expected average running cost of `policy` over `horizon` steps from grid state `start`,
/// computed exactly on the grid chain with the stationary Riccati weight.
pub fn evaluate_policy_cost(
    grid: &StateGrid,
    policy: &SchedulingPolicy,
    model: &SchedulingModel,
    horizon: usize,
    start: usize,
) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::InvalidModel("horizon must be at least 1".into()));
    }
    let bell = average_cost_bellman(grid, model)?;
    if policy.is_stationary() {
        let dec = policy.decisions_on(grid, model, 0)?;
        return Ok(evaluate_decisions(&bell, &dec, horizon, start));
    }
    evaluate_time_varying(&bell, grid, model, policy, horizon, start)
}

fn evaluate_time_varying(
    bell: &Bellman,
    grid: &StateGrid,
    model: &SchedulingModel,
    policy: &SchedulingPolicy,
    horizon: usize,
    start: usize,
) -> Result<f64> {
    let mut mu = vec![0.0; grid.len()];
    mu[start] = 1.0;
    let mut total = 0.0;
    for t in 0..horizon {
        let dec = policy.decisions_on(grid, model, t)?;
        let mut next = vec![0.0; grid.len()];
        for z in 0..grid.len() {
            if mu[z] == 0.0 {
                continue;
            }
            total += mu[z] * bell.cost(z, dec[z]);
            for (j, p) in grid.successors(z, dec[z]) {
                next[j] += mu[z] * p;
            }
        }
        mu = next;
    }
    Ok(total / horizon as f64)
}
