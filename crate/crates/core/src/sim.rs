//! Closed-loop Monte Carlo simulation of plant, filter, network and scheduler.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{step_filter, xi, t_q, FilterState, Outcome};
use crate::mdp::SchedulingPolicy;
use crate::model::SchedulingModel;
use crate::psd::{min_eig, CovMatrix};

/// Covariance trace beyond which a run is declared diverged.
pub const DIVERGENCE_TRACE: f64 = 1e12;
const DIVERGENCE_STATE: f64 = 1e150;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStep {
    pub t: usize,
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub pi_trace: f64,
    pub pi_min_eig: f64,
    pub s: usize,
    pub q: usize,
    /// Whether the measurement requested at this step arrived.
    pub received: bool,
    pub u: Vec<f64>,
    pub net_cost: f64,
    pub stage_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub seed: u64,
    pub replication: u64,
    pub steps: Vec<SimStep>,
    pub diverged: bool,
    /// Time-averaged stage cost over the completed steps.
    pub mean_cost: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    pub horizon: usize,
    pub seed: u64,
    /// Independent random stream; distinct replications use distinct streams.
    pub stream: u64,
    /// Initial state covariance; the initial mean is zero.
    pub sigma0: Option<CovMatrix>,
    pub s0: Option<usize>,
    /// Keep per-step records. Costs are accumulated either way.
    pub record: bool,
}

impl EpisodeOptions {
    pub fn new(horizon: usize, seed: u64) -> Self {
        Self { horizon, seed, stream: 0, sigma0: None, s0: None, record: true }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Samples the next network state from row `s` of `P_q` with one uniform draw.
fn next_net_state(model: &SchedulingModel, q: usize, s: usize, u: f64) -> usize {
    let p = model.network.transition(q);
    let n = model.num_states();
    let mut acc = 0.0;
    for j in 0..n {
        acc += p[(s, j)];
        if u < acc {
            return j;
        }
    }
    (0..n).rev().find(|&j| p[(s, j)] > 0.0).unwrap_or(n - 1)
}

fn quad(v: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (v.transpose() * w * v)[(0, 0)]
}

/// Simulates one closed-loop episode under the scheduling policy and feedback `u = -K x_hat`.
///
/// Each step draws, in order: the next noise vector, the network successor uniform,
/// and the delivery uniform. A measurement arrives when its uniform is at least the loss rate,
/// so runs that share a seed are coupled across loss rates.
pub fn run_episode(
    model: &SchedulingModel,
    policy: &SchedulingPolicy,
    k: &DMatrix<f64>,
    opts: &EpisodeOptions,
) -> Result<SimTrace> {
    let plant = &model.plant;
    let d = plant.dim();
    if k.nrows() != plant.input_dim() || k.ncols() != d {
        return Err(Error::Dimension(format!("gain is {}x{}, expected {}x{d}", k.nrows(), k.ncols(), plant.input_dim())));
    }
    let mut rng = rng_for(opts.seed, opts.stream);
    let sigma0 = opts.sigma0.clone().unwrap_or_else(|| CovMatrix::zeros(d));
    let mut x = if sigma0.trace() > 0.0 {
        let e = nalgebra::SymmetricEigen::new(sigma0.matrix().clone());
        let root = DVector::from_iterator(d, e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
        &e.eigenvectors * DMatrix::from_diagonal(&root) * normal_vec(&mut rng, d)
    } else {
        DVector::zeros(d)
    };
    let mut filt = FilterState { x_hat: DVector::zeros(d), pi_hat: sigma0, s: opts.s0.unwrap_or(model.network.s_circ()) };
    if filt.s >= model.num_states() {
        return Err(Error::InvalidModel(format!("initial network state {} does not exist", filt.s)));
    }
    let dw = plant.noise_dim();
    let mut w = normal_vec(&mut rng, dw);
    let mut steps = Vec::with_capacity(if opts.record { opts.horizon } else { 0 });
    let mut total = 0.0;
    let mut done = 0;
    let mut diverged = false;
    for t in 0..opts.horizon {
        let s = filt.s;
        let q = policy.query(model, t, s, &filt.pi_hat)?;
        let u = -(k * &filt.x_hat);
        let net_cost = model.network.net_cost(s, q);
        let stage = net_cost + quad(&x, plant.r().matrix()) + quad(&u, plant.m().matrix());

        let x_next = plant.a() * &x + plant.b() * &u + plant.d() * &w;
        let w_next = normal_vec(&mut rng, dw);
        let s_next = next_net_state(model, q, s, rng.gen::<f64>());
        let received = rng.gen::<f64>() >= model.network.loss(s, q);
        let y = received.then(|| {
            let sen = plant.sensor(q, s);
            &sen.c * &x_next + &sen.f * &w_next
        });
        if opts.record {
            steps.push(SimStep {
                t,
                x: x.as_slice().to_vec(),
                x_hat: filt.x_hat.as_slice().to_vec(),
                pi_trace: filt.pi_hat.trace(),
                pi_min_eig: min_eig(&filt.pi_hat)?,
                s,
                q,
                received,
                u: u.as_slice().to_vec(),
                net_cost,
                stage_cost: stage,
            });
        }
        total += stage;
        done += 1;
        filt = step_filter(plant, &filt, q, &u, &Outcome { y, next_s: s_next })?;
        x = x_next;
        w = w_next;
        if filt.pi_hat.trace() > DIVERGENCE_TRACE || x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_STATE) || !total.is_finite() {
            diverged = true;
            break;
        }
    }
    Ok(SimTrace {
        seed: opts.seed,
        replication: opts.stream,
        steps,
        diverged,
        mean_cost: if done > 0 { total / done as f64 } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Mean over the runs that stayed finite; `None` when every run diverged.
    pub mean: Option<f64>,
    /// Needs at least two finite runs.
    pub std_error: Option<f64>,
    pub diverged: usize,
    pub replications: usize,
}

/// Mean and standard error of the time-averaged cost over independent replications.
/// Diverged runs are counted and excluded from the mean.
pub fn estimate_cost(
    model: &SchedulingModel,
    policy: &SchedulingPolicy,
    k: &DMatrix<f64>,
    horizon: usize,
    replications: usize,
    base_seed: u64,
) -> Result<CostEstimate> {
    if replications < 2 {
        return Err(Error::InvalidModel("at least two replications are required".into()));
    }
    let runs: Vec<Result<(f64, bool)>> = (0..replications as u64)
        .into_par_iter()
        .map(|r| {
            let opts = EpisodeOptions { stream: r, record: false, ..EpisodeOptions::new(horizon, base_seed) };
            run_episode(model, policy, k, &opts).map(|tr| (tr.mean_cost, tr.diverged))
        })
        .collect();
    let mut vals = Vec::with_capacity(replications);
    let mut diverged = 0;
    for r in runs {
        let (m, div) = r?;
        if div {
            diverged += 1;
        } else {
            vals.push(m);
        }
    }
    let n = vals.len() as f64;
    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / n);
    let std_error = mean.filter(|_| vals.len() > 1).map(|m| {
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Ok(CostEstimate { mean, std_error, diverged, replications })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub lambda_hat: f64,
    pub attempts: u64,
    pub visited: bool,
}

/// Online loss-rate estimates with a half-loss, half-success prior per (s, q).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRateEstimator {
    losses: Vec<Vec<u64>>,
    attempts: Vec<Vec<u64>>,
}

impl LossRateEstimator {
    pub fn new(num_states: usize, num_queries: usize) -> Self {
        Self { losses: vec![vec![0; num_queries]; num_states], attempts: vec![vec![0; num_queries]; num_states] }
    }

    pub fn observe(&mut self, s: usize, q: usize, received: bool) {
        self.attempts[s][q] += 1;
        if !received {
            self.losses[s][q] += 1;
        }
    }

    pub fn observe_trace(&mut self, trace: &SimTrace) {
        for st in &trace.steps {
            self.observe(st.s, st.q, st.received);
        }
    }

    pub fn estimate(&self, s: usize, q: usize) -> LossEstimate {
        let n = self.attempts[s][q];
        LossEstimate {
            lambda_hat: (self.losses[s][q] as f64 + 0.5) / (n as f64 + 1.0),
            attempts: n,
            visited: n > 0,
        }
    }

    /// Estimates as a `[s][q]` table.
    pub fn table(&self) -> Vec<Vec<LossEstimate>> {
        (0..self.attempts.len())
            .map(|s| (0..self.attempts[s].len()).map(|q| self.estimate(s, q)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovPathStep {
    pub s: usize,
    pub q: usize,
    pub received: bool,
    pub pi_hat: CovMatrix,
}

/// Covariance-only path: network state and error covariance evolve without a plant.
///
/// Per step this draws the network successor uniform and then the delivery uniform,
/// so two models differing only in loss rates see the same randomness.
pub fn covariance_path<F>(model: &SchedulingModel, mut choose: F, horizon: usize, seed: u64) -> Result<Vec<CovPathStep>>
where
    F: FnMut(usize, usize, &CovMatrix) -> Result<usize>,
{
    let mut rng = rng_for(seed, 0);
    let mut s = model.network.s_circ();
    let mut pi = CovMatrix::zeros(model.plant.dim());
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let q = choose(t, s, &pi)?;
        let s_next = next_net_state(model, q, s, rng.gen::<f64>());
        let received = rng.gen::<f64>() >= model.network.loss(s, q);
        let next = if received { t_q(&model.plant, q, s, &pi)? } else { xi(&model.plant, &pi) };
        out.push(CovPathStep { s, q, received, pi_hat: pi });
        pi = next;
        s = s_next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Heuristic;
    use crate::model::{scalar_plant, NetworkModel, PlantModel, Sensor};
    use crate::riccati::solve_are;
    use nalgebra::dmatrix;

    fn scalar_model(loss: &[f64]) -> SchedulingModel {
        let f: Vec<f64> = (0..loss.len()).map(|i| 1.0 - 0.5 * i as f64).collect();
        SchedulingModel::new(scalar_plant(2.0, &f).unwrap(), NetworkModel::single_state(loss).unwrap()).unwrap()
    }

    #[test]
    fn noiseless_lossless_tracks_exactly() {
        let plant = PlantModel::new_structural(
            dmatrix![2.0],
            dmatrix![1.0],
            dmatrix![0.0, 0.0],
            CovMatrix::identity(1),
            CovMatrix::identity(1),
            vec![vec![Sensor::new(dmatrix![1.0], dmatrix![0.0, 1.0])]],
        )
        .unwrap();
        let m = SchedulingModel::new(plant, NetworkModel::single_state(&[0.0]).unwrap()).unwrap();
        let tr = run_episode(&m, &SchedulingPolicy::Heuristic(Heuristic::Fixed(0)), &dmatrix![1.5], &EpisodeOptions::new(50, 3)).unwrap();
        for st in &tr.steps {
            assert_eq!(st.pi_trace, 0.0);
            assert_eq!(st.x, st.x_hat);
        }
    }

    #[test]
    fn near_total_loss_diverges() {
        let m = scalar_model(&[0.999]);
        let k = solve_are(&m.plant, 1.0).unwrap().k;
        let tr = run_episode(&m, &SchedulingPolicy::Heuristic(Heuristic::Fixed(0)), &k, &EpisodeOptions::new(10_000, 1)).unwrap();
        assert!(tr.diverged);
        // Trace grows like 4^t, so the threshold is crossed after about 20 steps.
        assert!(tr.steps.len() < 40);
    }

    #[test]
    fn seed_determinism() {
        let m = scalar_model(&[0.1, 0.15]);
        let k = solve_are(&m.plant, 1.0).unwrap().k;
        let p = SchedulingPolicy::Heuristic(Heuristic::Greedy);
        let a = run_episode(&m, &p, &k, &EpisodeOptions::new(300, 42)).unwrap();
        let b = run_episode(&m, &p, &k, &EpisodeOptions::new(300, 42)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = run_episode(&m, &p, &k, &EpisodeOptions::new(300, 43)).unwrap();
        assert_ne!(a, c);
        let e1 = estimate_cost(&m, &p, &k, 200, 4, 9).unwrap();
        let e2 = estimate_cost(&m, &p, &k, 200, 4, 9).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn cost_decomposition() {
        let m = scalar_model(&[0.1, 0.15]);
        let k = solve_are(&m.plant, 1.0).unwrap().k;
        let tr = run_episode(&m, &SchedulingPolicy::Heuristic(Heuristic::RoundRobin), &k, &EpisodeOptions::new(500, 5)).unwrap();
        let mut total = 0.0;
        for st in &tr.steps {
            total += st.net_cost + st.x[0] * st.x[0] + st.u[0] * st.u[0];
        }
        let recorded: f64 = tr.steps.iter().map(|s| s.stage_cost).sum();
        assert!((total - recorded).abs() <= 1e-9 * recorded.abs());
        assert!((tr.mean_cost - recorded / 500.0).abs() <= 1e-9 * tr.mean_cost);
        assert!(tr.steps.iter().enumerate().all(|(t, s)| s.q == t % 2));
    }

    #[test]
    fn estimator_examples() {
        let mut e = LossRateEstimator::new(1, 1);
        let empty = e.estimate(0, 0);
        assert_eq!((empty.lambda_hat, empty.visited), (0.5, false));
        for _ in 0..100 {
            e.observe(0, 0, true);
        }
        assert!((e.estimate(0, 0).lambda_hat - 0.5 / 101.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut e = LossRateEstimator::new(1, 1);
        for _ in 0..100_000 {
            e.observe(0, 0, rng.gen::<f64>() >= 0.3);
        }
        assert!((e.estimate(0, 0).lambda_hat - 0.3).abs() < 0.01);
    }

    #[test]
    fn estimator_from_trace() {
        let m = scalar_model(&[0.3]);
        let k = solve_are(&m.plant, 1.0).unwrap().k;
        let tr = run_episode(&m, &SchedulingPolicy::Heuristic(Heuristic::Fixed(0)), &k, &EpisodeOptions::new(20_000, 8)).unwrap();
        let mut e = LossRateEstimator::new(1, 1);
        e.observe_trace(&tr);
        let est = e.estimate(0, 0);
        assert!(est.visited && est.attempts == tr.steps.len() as u64);
        assert!((est.lambda_hat - 0.3).abs() < 0.02);
    }

    #[test]
    fn estimate_requires_two_replications() {
        let m = scalar_model(&[0.1]);
        let k = solve_are(&m.plant, 1.0).unwrap().k;
        assert!(estimate_cost(&m, &SchedulingPolicy::Heuristic(Heuristic::Fixed(0)), &k, 10, 1, 0).is_err());
    }
}
