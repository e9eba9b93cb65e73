//! Shared generators and property checks for integration tests and the acceptance run.
#![allow(dead_code)]

use nalgebra::DMatrix;
use netsched::kernel::{apply_kernel, apply_letter, eigenvalue_floor, t_q, xi, Letter};
use netsched::mdp::{fit_drift_constants, rvi_with, vi_step, Bellman, RviOptions};
use netsched::model::{NetworkModel, PlantModel, SchedulingModel, Sensor};
use netsched::psd::min_eig;
use netsched::CovMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn psd<R: Rng>(rng: &mut R, d: usize) -> CovMatrix {
    let k = rng.gen_range(1..=d);
    let g = gaussian(rng, d, k);
    CovMatrix::new(&g * g.transpose()).unwrap()
}

/// Random plant with `d` states, `nq` sensors and `ns` network states. Process and
/// measurement noise use disjoint noise columns, so D F' = 0 by construction.
pub fn plant<R: Rng>(rng: &mut R, d: usize, nq: usize, ns: usize) -> PlantModel {
    let m_max = 2.min(d);
    let a0 = gaussian(rng, d, d);
    let radius = a0.complex_eigenvalues().iter().map(|e| e.norm()).fold(1e-9, f64::max);
    let a = a0 * (rng.gen_range(0.5..1.5) / radius);
    let b = gaussian(rng, d, 1);
    let mut dm = DMatrix::zeros(d, d + m_max);
    dm.view_mut((0, 0), (d, d)).copy_from(&gaussian(rng, d, d));
    let sensors = (0..nq)
        .map(|_| {
            let per_state = if rng.gen_bool(0.5) { 1 } else { ns };
            (0..per_state)
                .map(|_| {
                    let rows = rng.gen_range(1..=m_max);
                    let mut f = DMatrix::zeros(rows, d + m_max);
                    let h = gaussian(rng, rows, rows) + DMatrix::identity(rows, rows) * 2.0;
                    f.view_mut((0, d), (rows, rows)).copy_from(&h);
                    Sensor::new(gaussian(rng, rows, d), f)
                })
                .collect()
        })
        .collect();
    PlantModel::new_structural(a, b, dm, CovMatrix::identity(d), CovMatrix::identity(1), sensors).unwrap()
}

pub fn stochastic<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.05..1.0));
    for i in 0..n {
        let s: f64 = p.row(i).sum();
        p.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    p
}

pub fn network<R: Rng>(rng: &mut R, loss: Vec<Vec<f64>>) -> NetworkModel {
    let (ns, nq) = (loss.len(), loss[0].len());
    let p = (0..nq).map(|_| stochastic(rng, ns)).collect();
    let cost = (0..ns).map(|_| (0..nq).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    NetworkModel::new(p, loss, cost, None).unwrap()
}

pub fn model<R: Rng>(rng: &mut R) -> SchedulingModel {
    let d = rng.gen_range(1..=3);
    let nq = rng.gen_range(1..=3);
    let ns = rng.gen_range(1..=2);
    let loss = (0..ns).map(|_| (0..nq).map(|_| rng.gen_range(0.0..0.9)).collect()).collect();
    let net = network(rng, loss);
    SchedulingModel::new(plant(rng, d, nq, ns), net).unwrap()
}

fn gap(lo: &CovMatrix, hi: &CovMatrix) -> f64 {
    netsched::psd::min_eig_sym(&(hi.matrix() - lo.matrix())).unwrap()
}

pub const ORDER_TOL: f64 = 1e-8;

/// Monotonicity of Xi and T_q along a random ordered pair.
pub fn check_monotone<R: Rng>(rng: &mut R) -> Result<(), String> {
    let m = model(rng);
    let d = m.plant.dim();
    let lo = psd(rng, d);
    let hi = lo.add(&psd(rng, d)).unwrap();
    let g = gap(&xi(&m.plant, &lo), &xi(&m.plant, &hi));
    if g < -ORDER_TOL {
        return Err(format!("Xi not monotone: min eig {g:e}"));
    }
    for q in 0..m.num_queries() {
        for s in 0..m.num_states() {
            let g = gap(&t_q(&m.plant, q, s, &lo).unwrap(), &t_q(&m.plant, q, s, &hi).unwrap());
            if g < -ORDER_TOL {
                return Err(format!("T_{q} not monotone: min eig {g:e}"));
            }
        }
    }
    Ok(())
}

/// Concavity of T_q and conditioning never increasing the covariance.
pub fn check_concave<R: Rng>(rng: &mut R) -> Result<(), String> {
    let m = model(rng);
    let d = m.plant.dim();
    let (s1, s2) = (psd(rng, d), psd(rng, d));
    let beta = rng.gen_range(0.0..=1.0);
    let mix = s1.convex(&s2, beta).unwrap();
    for q in 0..m.num_queries() {
        for s in 0..m.num_states() {
            let t = |c: &CovMatrix| t_q(&m.plant, q, s, c).unwrap();
            let chord = t(&s1).convex(&t(&s2), beta).unwrap();
            let g = gap(&chord, &t(&mix));
            if g < -ORDER_TOL {
                return Err(format!("T_{q} not concave: min eig {g:e}"));
            }
            let g = gap(&t(&s1), &xi(&m.plant, &s1));
            if g < -ORDER_TOL {
                return Err(format!("T_{q} exceeds Xi: min eig {g:e}"));
            }
        }
    }
    Ok(())
}

/// Eigenvalue floor of all words of length d from zero is positive and bounds every
/// word of that length applied to an arbitrary covariance.
pub fn check_floor<R: Rng>(rng: &mut R) -> Result<(), String> {
    let m = model(rng);
    let d = m.plant.dim();
    let floor = eigenvalue_floor(&m.plant, m.num_states(), d).unwrap();
    if !(floor > 0.0) {
        return Err(format!("floor {floor:e} is not positive"));
    }
    let mut c = psd(rng, d);
    for _ in 0..d {
        let l = if rng.gen_bool(0.4) {
            Letter::Lost
        } else {
            let q = rng.gen_range(0..m.num_queries());
            let s = if m.plant.sensors()[q].len() == 1 { 0 } else { rng.gen_range(0..m.num_states()) };
            Letter::Received { q, s }
        };
        c = apply_letter(&m.plant, l, &c).unwrap();
    }
    let e = min_eig(&c).unwrap();
    if e < floor * (1.0 - 1e-9) - 1e-12 {
        return Err(format!("word endpoint eigenvalue {e:e} below floor {floor:e}"));
    }
    Ok(())
}

/// Raising loss rates componentwise never lowers the expected next trace.
pub fn check_loss_comparison<R: Rng>(rng: &mut R) -> Result<(), String> {
    let m = model(rng);
    let (ns, nq) = (m.num_states(), m.num_queries());
    let higher: Vec<Vec<f64>> = m.network.loss_table().iter().map(|r| r.iter().map(|l| rng.gen_range(*l..=0.999)).collect()).collect();
    let m2 = SchedulingModel::new(m.plant.clone(), m.network.with_loss(higher).unwrap()).unwrap();
    let c = psd(rng, m.plant.dim());
    let s = rng.gen_range(0..ns);
    let q = rng.gen_range(0..nq);
    let tr = |_: usize, x: &CovMatrix| Ok(x.trace());
    let a = apply_kernel(&m, tr, s, &c, q).unwrap();
    let b = apply_kernel(&m2, tr, s, &c, q).unwrap();
    if a > b + 1e-10 * (1.0 + b.abs()) {
        return Err(format!("expected trace fell from {a} to {b} when losses rose"));
    }
    Ok(())
}

/// Runs `check` on `n` instances drawn from `rng`, stopping at the first failure.
pub fn run_many<R: Rng>(rng: &mut R, n: usize, check: fn(&mut R) -> Result<(), String>) -> Result<(), String> {
    for i in 0..n {
        check(rng).map_err(|e| format!("instance {i}: {e}"))?;
    }
    Ok(())
}

/// Outcome of the value-iteration bound checks.
#[derive(Debug)]
pub struct BoundReport {
    pub states: usize,
    pub iterations: usize,
    pub worst_sandwich: f64,
    pub worst_bracket: f64,
    pub worst_drift: f64,
    pub theta1: f64,
    pub theta2: f64,
}

/// Checks the lower sandwich bound and the two-sided bracket along `iters` value-iteration
/// steps from zero, and the drift inequality at the converged solution. Returned slacks are
/// the largest violations, relative to `1 + |value|`; nonpositive means every check held.
pub fn check_value_bounds(bell: &Bellman, iters: usize) -> BoundReport {
    let conv = rvi_with(bell, &RviOptions::default(), None).unwrap();
    let rho = conv.rho_star.unwrap();
    let lo = conv.values.iter().copied().fold(f64::INFINITY, f64::min);
    let f: Vec<f64> = conv.values.iter().map(|v| v - lo).collect();
    let dc = fit_drift_constants(bell, &f, rho);
    let r = dc.rho();
    let qstar = &conv.minimizer;
    let n = f.len();
    let mut worst = (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);

    let tf = bell.transition(&f, qstar);
    for z in 0..n {
        let v = tf[z] - (r * f[z] + rho + dc.theta2);
        worst.2 = worst.2.max(v / (1.0 + f[z].abs()));
    }

    let mut phi = vec![0.0; n];
    let mut rn = 1.0;
    for _ in 0..iters {
        let (next, arg) = vi_step(bell, &phi, rho);
        let e: Vec<f64> = phi.iter().zip(&f).map(|(a, b)| a - b).collect();
        let lower = bell.transition(&e, &arg);
        let upper = bell.transition(&e, qstar);
        for z in 0..n {
            let en = next[z] - f[z];
            let scale = 1.0 + next[z].abs() + f[z].abs();
            worst.1 = worst.1.max((lower[z] - en) / scale).max((en - upper[z]) / scale);
        }
        rn *= r;
        phi = next;
        for z in 0..n {
            let bound = (1.0 - rn) * (f[z] - dc.delta);
            worst.0 = worst.0.max((bound - phi[z]) / (1.0 + phi[z].abs() + f[z].abs()));
        }
    }
    BoundReport {
        states: n,
        iterations: iters,
        worst_sandwich: worst.0,
        worst_bracket: worst.1,
        worst_drift: worst.2,
        theta1: dc.theta1,
        theta2: dc.theta2,
    }
}

/// Optimal finite-horizon cost by full expectimin enumeration over queries and branches.
pub fn expectimin(m: &SchedulingModel, weights: &[CovMatrix], alpha: f64, t: usize, s: usize, c: &CovMatrix) -> f64 {
    if t == weights.len() {
        return 0.0;
    }
    (0..m.num_queries())
        .map(|q| {
            let stage = m.network.net_cost(s, q) + c.trace_product(weights[t].matrix());
            let cont: f64 = netsched::kernel::branches(m, s, c, q)
                .unwrap()
                .iter()
                .map(|b| b.probability * expectimin(m, weights, alpha, t + 1, b.next_net_state, &b.next_cov))
                .sum();
            stage + alpha * cont
        })
        .fold(f64::INFINITY, f64::min)
}

/// Largest gap between finite-horizon dynamic programming on an exact depth-limited grid and
/// brute-force enumeration, over every stage and every state reachable by that stage.
pub fn brute_force_gap(m: &SchedulingModel, n: usize, alpha: f64, max_states: usize) -> Result<(f64, usize), String> {
    use netsched::mdp::{finite_horizon_dp, GridOptions, StateGrid};
    use netsched::riccati::finite_horizon_lqr;
    let opts = GridOptions { r_max: Some(1e12), resolution: 0.0, max_depth: Some(n), ..Default::default() };
    let grid = StateGrid::build(m, &opts).map_err(|e| e.to_string())?;
    if grid.len() > max_states {
        return Err(format!("grid has {} states, limit {max_states}", grid.len()));
    }
    let d = m.plant.dim();
    let pi_fin = CovMatrix::zeros(d);
    let tables = finite_horizon_dp(&grid, m, alpha, n, &pi_fin).map_err(|e| e.to_string())?;
    let lqr = finite_horizon_lqr(&m.plant, alpha, n, &pi_fin).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for t in 0..n {
        for z in 0..grid.len() {
            if grid.depth(z) > t {
                continue;
            }
            let want = expectimin(m, &lqr.pi_tildes[t..], alpha, 0, grid.net_state(z), grid.cov(z));
            worst = worst.max((tables[t].values[z] - want).abs());
            compared += 1;
        }
    }
    Ok((worst, compared))
}
