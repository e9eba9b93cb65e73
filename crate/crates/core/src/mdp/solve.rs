//! Dynamic programming on a state grid: finite horizon, discounted and average cost.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::StateGrid;
use crate::error::{Error, Result};
use crate::model::{check_minorization, SchedulingModel};
use crate::psd::CovMatrix;
use crate::riccati::{finite_horizon_lqr, solve_are};

pub const RVI_TOL: f64 = 1e-8;
pub const RVI_MAX_ITER: usize = 100_000;
const PAR_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub values: Vec<f64>,
    /// Minimizing query per state, ties to the lowest index.
    pub minimizer: Vec<usize>,
    /// Average-cost estimate; present for relative value iteration output.
    pub rho_star: Option<f64>,
    pub iterations: usize,
    /// Final stopping statistic: span of the last update for relative value
    /// iteration, weighted sup norm for discounted iteration.
    pub span_residual: f64,
}

/// Running costs and the one-step Bellman operator on a grid.
pub struct Bellman<'g> {
    grid: &'g StateGrid,
    /// `costs[z * nq + q] = R_net(s, q) + trace(weight * sigma)`.
    costs: Vec<f64>,
    alpha: f64,
}

/// Running cost table for the given estimation-error weight.
pub fn stage_costs(grid: &StateGrid, model: &SchedulingModel, weight: &CovMatrix) -> Vec<f64> {
    let nq = grid.num_queries();
    let mut c = vec![0.0; grid.len() * nq];
    for z in 0..grid.len() {
        let tr = grid.cov(z).trace_product(weight.matrix());
        for q in 0..nq {
            c[z * nq + q] = model.network.net_cost(grid.net_state(z), q) + tr;
        }
    }
    c
}

impl<'g> Bellman<'g> {
    pub fn new(grid: &'g StateGrid, model: &SchedulingModel, weight: &CovMatrix, alpha: f64) -> Self {
        Self { grid, costs: stage_costs(grid, model, weight), alpha }
    }

    pub fn grid(&self) -> &StateGrid {
        self.grid
    }

    pub fn cost(&self, z: usize, q: usize) -> f64 {
        self.costs[z * self.grid.num_queries() + q]
    }

    /// `min_q { c_q + alpha T_q f }` and its minimizer at every state.
    pub fn backup(&self, f: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let n = self.grid.len();
        let mut vals = vec![0.0; n];
        let mut arg = vec![0usize; n];
        vals.par_chunks_mut(PAR_CHUNK)
            .zip(arg.par_chunks_mut(PAR_CHUNK))
            .enumerate()
            .for_each(|(k, (vc, ac))| {
                for (i, (v, a)) in vc.iter_mut().zip(ac.iter_mut()).enumerate() {
                    (*v, *a) = self.backup_at(k * PAR_CHUNK + i, f);
                }
            });
        (vals, arg)
    }

    fn backup_at(&self, z: usize, f: &[f64]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for q in 0..self.grid.num_queries() {
            let v = self.cost(z, q) + self.alpha * self.grid.expect(z, q, f);
            if v < best.0 {
                best = (v, q);
            }
        }
        best
    }

    /// `c_q + alpha T_q f` with `q` fixed per state.
    pub fn evaluate(&self, f: &[f64], decisions: &[usize]) -> Vec<f64> {
        (0..self.grid.len())
            .map(|z| self.cost(z, decisions[z]) + self.alpha * self.grid.expect(z, decisions[z], f))
            .collect()
    }

    /// `T_q f` with `q` fixed per state.
    pub fn transition(&self, f: &[f64], decisions: &[usize]) -> Vec<f64> {
        (0..self.grid.len()).map(|z| self.grid.expect(z, decisions[z], f)).collect()
    }
}

/// Backward induction over `n` steps with time-varying stage weights.
/// Entry `t` of the result holds the cost-to-go from time `t`.
pub fn finite_horizon_dp(
    grid: &StateGrid,
    model: &SchedulingModel,
    alpha: f64,
    n: usize,
    pi_fin: &CovMatrix,
) -> Result<Vec<ValueTable>> {
    let lqr = finite_horizon_lqr(&model.plant, alpha, n, pi_fin)?;
    let mut out = vec![ValueTable {
        values: vec![0.0; grid.len()],
        minimizer: vec![0; grid.len()],
        rho_star: None,
        iterations: 0,
        span_residual: 0.0,
    }];
    for t in (0..n).rev() {
        let bell = Bellman::new(grid, model, &lqr.pi_tildes[t], alpha);
        let (values, minimizer) = bell.backup(&out.last().unwrap().values);
        out.push(ValueTable { values, minimizer, rho_star: None, iterations: n - t, span_residual: 0.0 });
    }
    out.reverse();
    Ok(out)
}

/// Discounted value iteration from `init` (zero by default).
pub fn discounted_vi(
    grid: &StateGrid,
    model: &SchedulingModel,
    alpha: f64,
    tol: f64,
    max_iter: usize,
    init: Option<&[f64]>,
) -> Result<ValueTable> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidModel(format!("discount {alpha} is outside (0, 1)")));
    }
    let are = solve_are(&model.plant, alpha)?;
    let bell = Bellman::new(grid, model, &are.pi_tilde, alpha);
    let weight: Vec<f64> = (0..grid.len()).map(|z| 1.0 + grid.cov(z).trace_product(are.pi_tilde.matrix())).collect();
    let mut f = init.map_or_else(|| vec![0.0; grid.len()], <[f64]>::to_vec);
    let mut gap = f64::INFINITY;
    for it in 1..=max_iter {
        let (next, arg) = bell.backup(&f);
        gap = next.iter().zip(&f).zip(&weight).map(|((a, b), w)| (a - b).abs() / w).fold(0.0, f64::max);
        f = next;
        if gap <= tol {
            return Ok(ValueTable { values: f, minimizer: arg, rho_star: None, iterations: it, span_residual: gap });
        }
    }
    Err(Error::Convergence { iterations: max_iter, residual: gap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RviOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Run even when the minorization certificate fails.
    pub allow_uncertified: bool,
}

impl Default for RviOptions {
    fn default() -> Self {
        Self { tol: RVI_TOL, max_iter: RVI_MAX_ITER, allow_uncertified: false }
    }
}

fn span(a: &[f64], b: &[f64]) -> f64 {
    let (lo, hi) = a.iter().zip(b).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), (x, y)| {
        let d = x - y;
        (l.min(d), h.max(d))
    });
    hi - lo
}

/// One relative value iteration step: `min_q { c_q + T_q phi } - phi(theta)`.
pub fn rvi_step(bell: &Bellman, phi: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let anchor = phi[bell.grid().theta_id()];
    let (mut v, a) = bell.backup(phi);
    v.iter_mut().for_each(|x| *x -= anchor);
    (v, a)
}

/// One value iteration step with the average cost removed: `min_q { c_q + T_q phi } - rho`.
pub fn vi_step(bell: &Bellman, phi: &[f64], rho: f64) -> (Vec<f64>, Vec<usize>) {
    let (mut v, a) = bell.backup(phi);
    v.iter_mut().for_each(|x| *x -= rho);
    (v, a)
}

/// Bellman operator for the average-cost problem, weighted by the stationary Riccati weight.
pub fn average_cost_bellman<'g>(grid: &'g StateGrid, model: &SchedulingModel) -> Result<Bellman<'g>> {
    let are = solve_are(&model.plant, 1.0)?;
    Ok(Bellman::new(grid, model, &are.pi_tilde, 1.0))
}

/// Relative value iteration anchored at the reference state.
pub fn rvi(grid: &StateGrid, model: &SchedulingModel, opts: &RviOptions, init: Option<&[f64]>) -> Result<ValueTable> {
    if let Err(f) = check_minorization(&model.network) {
        if !opts.allow_uncertified {
            return Err(Error::Minorization(format!("{f}; set the override to run anyway")));
        }
    }
    let bell = average_cost_bellman(grid, model)?;
    rvi_with(&bell, opts, init)
}

pub fn rvi_with(bell: &Bellman, opts: &RviOptions, init: Option<&[f64]>) -> Result<ValueTable> {
    let theta = bell.grid().theta_id();
    let mut phi = init.map_or_else(|| vec![0.0; bell.grid().len()], <[f64]>::to_vec);
    let mut history = Vec::new();
    for it in 1..=opts.max_iter {
        let (next, arg) = rvi_step(bell, &phi);
        let sp = span(&next, &phi);
        let rho = next[theta];
        if !sp.is_finite() {
            break;
        }
        if history.len() == 64 {
            history.remove(0);
        }
        history.push(sp);
        phi = next;
        if sp <= opts.tol {
            return Ok(ValueTable { values: phi, minimizer: arg, rho_star: Some(rho), iterations: it, span_residual: sp });
        }
    }
    Err(Error::PossiblyUnstable {
        iterations: opts.max_iter,
        last_span: history.last().copied().unwrap_or(f64::NAN),
        span_history: history,
    })
}

/// Exact expected average cost of a stationary decision table over `horizon` steps,
/// by propagating the state distribution on the grid from state `start`.
pub fn evaluate_decisions(bell: &Bellman, decisions: &[usize], horizon: usize, start: usize) -> f64 {
    let grid = bell.grid();
    let mut mu = vec![0.0; grid.len()];
    mu[start] = 1.0;
    let mut next = vec![0.0; grid.len()];
    let mut total = 0.0;
    for _ in 0..horizon {
        next.iter_mut().for_each(|x| *x = 0.0);
        for z in 0..grid.len() {
            let m = mu[z];
            if m == 0.0 {
                continue;
            }
            total += m * bell.cost(z, decisions[z]);
            for (t, p) in grid.successors(z, decisions[z]) {
                next[t] += m * p;
            }
        }
        std::mem::swap(&mut mu, &mut next);
    }
    total / horizon as f64
}
