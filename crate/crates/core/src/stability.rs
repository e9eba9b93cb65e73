//! Loss-rate stability region: analytic diagonal results, Lyapunov drift
//! certificates and Monte Carlo probing with ray bisection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{t_q, xi};
use crate::mdp::{rvi, GridOptions, Heuristic, RviOptions, SchedulingPolicy, StateGrid, TablePolicy};
use crate::model::{diagonal_plant, NetworkModel, SchedulingModel};
use crate::psd::CovMatrix;
use crate::riccati::solve_are;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    Analytic,
    DriftCertificate,
    MonteCarlo,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    /// Slope of the running mean over the second half of the horizon; infinite after a divergence.
    #[serde(with = "crate::serde_float")]
    pub slope: f64,
    pub slope_tol: f64,
    /// Mean estimated cost level over the second half.
    pub level: f64,
    pub diverged: usize,
    /// Replications run; runs stop at the first divergence.
    pub replications: usize,
    pub horizon: usize,
    /// Mean share of the cost escaping past the value cap per step, second half.
    pub escape: f64,
    /// Largest number of occupied bins seen.
    pub max_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleDetails {
    None,
    Probe(ProbeStats),
    Certificate(DriftCertificate),
    Note(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSample {
    pub lambda: Vec<f64>,
    pub verdict: Verdict,
    pub evidence: Evidence,
    pub details: SampleDetails,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalRegion {
    /// Equal unstable modes: the region is exactly `[0, critical)^n`.
    Box { critical: f64, dim: usize },
    /// Unequal modes: `lambda_i < critical[i]` is necessary for each coordinate,
    /// but the joint region is not characterized.
    NecessaryOnly { critical: Vec<f64> },
}

impl DiagonalRegion {
    pub fn verdict(&self, lambda: &[f64]) -> Verdict {
        match self {
            Self::Box { critical, .. } => {
                if lambda.iter().all(|&l| l < *critical) {
                    Verdict::Stable
                } else {
                    Verdict::Unstable
                }
            }
            Self::NecessaryOnly { critical } => {
                if lambda.iter().zip(critical).any(|(l, c)| l >= c) {
                    Verdict::Unstable
                } else {
                    Verdict::Undetermined
                }
            }
        }
    }

    pub fn sample(&self, lambda: &[f64]) -> RegionSample {
        RegionSample {
            lambda: lambda.to_vec(),
            verdict: self.verdict(lambda),
            evidence: Evidence::Analytic,
            details: SampleDetails::None,
        }
    }
}

/// Stabilizable loss-rate region of a diagonal system with unstable scalar modes `a_values`,
/// one sensor per mode.
pub fn diagonal_region(a_values: &[f64]) -> Result<DiagonalRegion> {
    if a_values.is_empty() {
        return Err(Error::InvalidModel("at least one mode is required".into()));
    }
    if let Some(a) = a_values.iter().find(|a| !(a.abs() > 1.0)) {
        return Err(Error::InvalidModel(format!("mode {a} is not unstable; every |a| must exceed 1")));
    }
    let crit: Vec<f64> = a_values.iter().map(|a| 1.0 / (a * a)).collect();
    if a_values.iter().all(|a| a.abs() == a_values[0].abs()) {
        Ok(DiagonalRegion::Box { critical: crit[0], dim: a_values.len() })
    } else {
        Ok(DiagonalRegion::NecessaryOnly { critical: crit })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCertificate {
    pub epsilon: f64,
    /// Contraction constant `(eps / (1 - eps) + lambda) a^2`, below one.
    pub epsilon0: f64,
    /// Additive constant of the drift inequality.
    pub c0: f64,
    pub checked_points: usize,
    /// Largest value of `drift - (c0 - (1 - epsilon0) V)` over the checked points.
    pub worst_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftOutcome {
    Certified(DriftCertificate),
    Undetermined(String),
}

/// Lyapunov function weighting the smaller variance by `1 - eps` and the larger by `eps`.
pub fn lyapunov_v(eps: f64, xi1: f64, xi2: f64) -> f64 {
    let (hi, lo) = if xi1 >= xi2 { (xi1, xi2) } else { (xi2, xi1) };
    eps * hi + (1.0 - eps) * lo
}

const SPOT_CHECKS: usize = 10_000;

/// Drift certificate for two scalar modes with common unstable pole `a` and common loss rate.
///
/// With `epsilon = None`, a log grid of candidates is searched for the one with the smallest
/// implied stationary bound `c0 / (1 - epsilon0)`.
pub fn drift_certificate_diagonal(a: f64, f_values: &[f64], lambda: f64, epsilon: Option<f64>) -> Result<DriftOutcome> {
    if f_values.len() != 2 {
        return Err(Error::Dimension(format!("the certificate covers two modes, got {}", f_values.len())));
    }
    if !(a.abs() > 1.0) {
        return Err(Error::InvalidModel(format!("mode {a} is not unstable")));
    }
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidModel(format!("loss rate {lambda} is outside [0, 1)")));
    }
    let a2 = a * a;
    let m0 = f_values.iter().map(|f| f * f).fold(0.0, f64::max);
    let eps0 = |e: f64| (e / (1.0 - e) + lambda) * a2;
    let c0 = |e: f64| (1.0 - lambda) * (m0 + e) + lambda;
    let candidates: Vec<f64> = match epsilon {
        Some(e) if e > 0.0 && e < 1.0 => vec![e],
        Some(e) => return Err(Error::InvalidModel(format!("epsilon {e} is outside (0, 1)"))),
        None => (0..=120).map(|k| 10f64.powf(-6.0 + k as f64 * 0.05)).filter(|&e| e < 1.0).collect(),
    };
    let best = candidates
        .iter()
        .copied()
        .filter(|&e| eps0(e) < 1.0)
        .min_by(|&x, &y| (c0(x) / (1.0 - eps0(x))).total_cmp(&(c0(y) / (1.0 - eps0(y)))));
    let Some(e) = best else {
        return Ok(DriftOutcome::Undetermined(format!(
            "no epsilon gives a contraction: lambda a^2 = {} and the bound only grows with epsilon",
            lambda * a2
        )));
    };
    let model = SchedulingModel::new(
        diagonal_plant(&[a, a], f_values)?,
        NetworkModel::single_state(&[lambda, lambda])?,
    )?;
    let (e0, c) = (eps0(e), c0(e));
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..SPOT_CHECKS {
        let x1 = 10f64.powf(rng.gen_range(-4.0..8.0));
        let x2 = 10f64.powf(rng.gen_range(-4.0..8.0));
        let sig = CovMatrix::from_diagonal(&[x1, x2])?;
        let v = lyapunov_v(e, x1, x2);
        let lost = xi(&model.plant, &sig);
        let mut drift = f64::INFINITY;
        for q in 0..2 {
            let rec = t_q(&model.plant, q, 0, &sig)?;
            let tv = (1.0 - lambda) * lyapunov_v(e, rec.get(0, 0), rec.get(1, 1)) + lambda * lyapunov_v(e, lost.get(0, 0), lost.get(1, 1));
            drift = drift.min(tv - v);
        }
        let slack = drift - (c - (1.0 - e0) * v);
        worst = worst.max(slack / (1.0 + v));
    }
    if worst > 1e-9 {
        return Ok(DriftOutcome::Undetermined(format!("spot check violated the drift inequality by {worst:e}")));
    }
    Ok(DriftOutcome::Certified(DriftCertificate { epsilon: e, epsilon0: e0, c0: c, checked_points: SPOT_CHECKS, worst_slack: worst }))
}

/// How the probe chooses queries.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySource {
    /// Solve the average-cost problem for each loss-rate vector and use its policy.
    Resolve { grid: GridOptions, rvi: RviOptions },
    Fixed(SchedulingPolicy),
}

impl Default for PolicySource {
    fn default() -> Self {
        Self::Resolve {
            grid: GridOptions { r_max: Some(1e4), ..Default::default() },
            rvi: RviOptions { allow_uncertified: true, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub horizon: usize,
    pub replications: usize,
    /// Ratio between consecutive bin edges of each covariance diagonal entry.
    pub bin_ratio: f64,
    /// Cost level past which mass is no longer tracked.
    pub value_cap: f64,
    pub seed: u64,
    pub policy: PolicySource,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { horizon: 10_000, replications: 50, bin_ratio: 2.0, value_cap: 1e100, seed: 0, policy: PolicySource::default() }
    }
}

/// Estimated mean cost beyond which a replication counts as diverged.
pub const PROBE_DIVERGENCE: f64 = 1e12;
/// Escape share above which growth is beyond doubt.
pub const ESCAPE_UNSTABLE: f64 = 1e-3;
/// Escape share below which the truncated tail is negligible.
pub const ESCAPE_NEGLIGIBLE: f64 = 1e-6;
/// Quantization levels of each coordinate's share of the covariance diagonal.
const SHAPE_LEVELS: f64 = 8.0;

/// Covariance dynamics used by the probe. The diagonal variant avoids dense algebra when
/// every covariance stays diagonal.
trait Dynamics: Sync {
    type C: Clone + Send;
    fn zero(&self) -> Self::C;
    fn lost(&self, c: &Self::C) -> Self::C;
    fn received(&self, q: usize, s: usize, c: &Self::C) -> Result<Self::C>;
    fn value(&self, c: &Self::C) -> f64;
    fn diag(&self, c: &Self::C) -> Vec<f64>;
    fn query(&self, policy: &SchedulingPolicy, t: usize, s: usize, c: &Self::C) -> Result<usize>;
}

struct Dense<'m> {
    model: &'m SchedulingModel,
    weight: CovMatrix,
}

impl Dynamics for Dense<'_> {
    type C = CovMatrix;
    fn zero(&self) -> CovMatrix {
        CovMatrix::zeros(self.model.plant.dim())
    }
    fn lost(&self, c: &CovMatrix) -> CovMatrix {
        xi(&self.model.plant, c)
    }
    fn received(&self, q: usize, s: usize, c: &CovMatrix) -> Result<CovMatrix> {
        t_q(&self.model.plant, q, s, c)
    }
    fn value(&self, c: &CovMatrix) -> f64 {
        c.trace_product(self.weight.matrix())
    }
    fn diag(&self, c: &CovMatrix) -> Vec<f64> {
        c.matrix().diagonal().iter().copied().collect()
    }
    fn query(&self, policy: &SchedulingPolicy, t: usize, s: usize, c: &CovMatrix) -> Result<usize> {
        policy.query(self.model, t, s, c)
    }
}

/// Per-sensor scalar observation of one coordinate: coordinate, gain, noise variance.
type ScalarObs = Vec<(usize, f64, f64)>;

struct Diagonal<'m> {
    model: &'m SchedulingModel,
    a2: Vec<f64>,
    noise: Vec<f64>,
    /// Indexed `[q][s]`, expanded over network states.
    obs: Vec<Vec<ScalarObs>>,
    weight: Vec<f64>,
}

impl<'m> Diagonal<'m> {
    /// Succeeds when A, D D', the weight, every F F' are diagonal and every sensor row reads one
    /// distinct coordinate, so that diagonal covariances stay diagonal.
    fn detect(model: &'m SchedulingModel, weight: &CovMatrix) -> Option<Self> {
        let p = &model.plant;
        let d = p.dim();
        let is_diag = |m: &nalgebra::DMatrix<f64>| (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0));
        if !is_diag(p.a()) || !is_diag(p.dd_t().matrix()) || !is_diag(weight.matrix()) {
            return None;
        }
        let mut obs = Vec::new();
        for q in 0..model.num_queries() {
            let mut per_s = Vec::new();
            for s in 0..model.num_states() {
                let sen = p.sensor(q, s);
                let ff = &sen.f * sen.f.transpose();
                if !is_diag(&ff) {
                    return None;
                }
                let mut rows = Vec::new();
                for r in 0..sen.c.nrows() {
                    let nz: Vec<usize> = (0..d).filter(|&j| sen.c[(r, j)] != 0.0).collect();
                    match nz.as_slice() {
                        [] => {}
                        [j] if rows.iter().all(|(k, _, _)| k != j) => rows.push((*j, sen.c[(r, *j)], ff[(r, r)])),
                        _ => return None,
                    }
                }
                per_s.push(rows);
            }
            obs.push(per_s);
        }
        Some(Self {
            model,
            a2: (0..d).map(|i| p.a()[(i, i)].powi(2)).collect(),
            noise: (0..d).map(|i| p.dd_t().get(i, i)).collect(),
            obs,
            weight: (0..d).map(|i| weight.get(i, i)).collect(),
        })
    }

    fn to_cov(c: &[f64]) -> CovMatrix {
        CovMatrix::from_sym_unchecked(nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(c)))
    }
}

impl Dynamics for Diagonal<'_> {
    type C = Vec<f64>;
    fn zero(&self) -> Vec<f64> {
        vec![0.0; self.a2.len()]
    }
    fn lost(&self, c: &Vec<f64>) -> Vec<f64> {
        c.iter().zip(&self.a2).zip(&self.noise).map(|((x, a2), n)| n + a2 * x).collect()
    }
    fn received(&self, q: usize, s: usize, c: &Vec<f64>) -> Result<Vec<f64>> {
        let mut out = self.lost(c);
        for &(j, g, v) in &self.obs[q][s] {
            let p = out[j];
            let k = p * g / (g * g * p + v);
            out[j] = (1.0 - k * g).powi(2) * p + k * k * v;
        }
        Ok(out)
    }
    fn value(&self, c: &Vec<f64>) -> f64 {
        c.iter().zip(&self.weight).map(|(x, w)| x * w).sum()
    }
    fn diag(&self, c: &Vec<f64>) -> Vec<f64> {
        c.clone()
    }
    fn query(&self, policy: &SchedulingPolicy, t: usize, s: usize, c: &Vec<f64>) -> Result<usize> {
        match policy {
            SchedulingPolicy::Heuristic(Heuristic::Greedy) => {
                let lost = self.lost(c);
                let lost_tr: f64 = lost.iter().sum();
                let mut best = (f64::INFINITY, 0);
                for q in 0..self.model.num_queries() {
                    let lam = self.model.network.loss(s, q);
                    let rec: f64 = self.received(q, s, c)?.iter().sum();
                    let v = (1.0 - lam) * rec + lam * lost_tr;
                    if v < best.0 {
                        best = (v, q);
                    }
                }
                Ok(best.1)
            }
            SchedulingPolicy::Table(_) => policy.query(self.model, t, s, &Self::to_cov(c)),
            SchedulingPolicy::Heuristic(_) => policy.query(self.model, t, s, &CovMatrix::zeros(0)),
        }
    }
}

/// One replication's cost series plus the fraction of cost that escaped past the value cap.
struct RunOutput {
    est: Vec<f64>,
    escape: Vec<f64>,
    max_bins: usize,
}

#[derive(Clone)]
struct Particle<C> {
    s: usize,
    key: u64,
    c: C,
    w: f64,
    v: f64,
}

/// Propagates the law of `(s, Sigma)` under the policy and records `E[trace(W Sigma_t)]`.
///
/// Successors are expanded exactly. Particles sharing a network state and a log-spaced bin of
/// every diagonal entry are merged into one carrying their total mass and the state of one
/// member drawn in proportion to mass, which keeps the expectation unbiased. Mass whose cost
/// exceeds `cap` leaves the system and its share of the cost is reported as escape.
/// Returns `None` once the estimate crosses the divergence threshold.
fn law_run<D: Dynamics>(
    dy: &D,
    model: &SchedulingModel,
    policy: &SchedulingPolicy,
    opts: &ProbeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Option<RunOutput>> {
    let n_net = model.num_states();
    let inv_log = 1.0 / opts.bin_ratio.ln();
    // Bin by log cost and the coarse shape of the diagonal. Keys are hashed: a collision only
    // merges more, and every merge is unbiased.
    let key = |c: &D::C, v: f64| -> u64 {
        let d = dy.diag(c);
        let tot: f64 = d.iter().sum();
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ (v.max(1e-12).ln() * inv_log).floor() as i64 as u64;
        if d.len() > 1 && tot > 0.0 {
            for x in &d {
                h = (h ^ (x / tot * SHAPE_LEVELS).round() as u64).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17);
            }
        }
        h
    };
    let z = dy.zero();
    let mut parts = vec![Particle { s: model.network.s_circ(), key: key(&z, 0.0), c: z, w: 1.0, v: 0.0 }];
    let mut kids: Vec<Particle<D::C>> = Vec::new();
    let mut out = RunOutput { est: Vec::with_capacity(opts.horizon), escape: Vec::with_capacity(opts.horizon), max_bins: 1 };
    for t in 0..opts.horizon {
        kids.clear();
        let mut escaped = 0.0;
        for p in &parts {
            let q = dy.query(policy, t, p.s, &p.c)?;
            let lam = model.network.loss(p.s, q);
            let mut branch = |c: D::C, mass: f64, kids: &mut Vec<Particle<D::C>>| {
                let v = dy.value(&c);
                if v > opts.value_cap {
                    escaped += mass * v;
                    return;
                }
                let k = key(&c, v);
                for s2 in 0..n_net {
                    let pr = model.network.prob(q, p.s, s2);
                    if pr > 0.0 {
                        kids.push(Particle { s: s2, key: k, c: c.clone(), w: mass * pr, v });
                    }
                }
            };
            if lam < 1.0 {
                branch(dy.received(q, p.s, &p.c)?, p.w * (1.0 - lam), &mut kids);
            }
            if lam > 0.0 {
                branch(dy.lost(&p.c), p.w * lam, &mut kids);
            }
        }
        let kept: f64 = kids.iter().map(|k| k.w * k.v).sum();
        let mean = kept + escaped;
        if !(mean <= PROBE_DIVERGENCE) {
            return Ok(None);
        }
        out.est.push(mean);
        out.escape.push(if mean > 0.0 { escaped / mean } else { 0.0 });
        kids.sort_unstable_by_key(|k| (k.s, k.key));
        parts.clear();
        let floor = 1e-20;
        for k in kids.drain(..) {
            match parts.last_mut() {
                Some(last) if last.s == k.s && last.key == k.key => {
                    let w = last.w + k.w;
                    if rng.gen::<f64>() * w < k.w {
                        last.c = k.c;
                        last.v = k.v;
                    }
                    last.w = w;
                }
                _ => parts.push(k),
            }
        }
        parts.retain(|p| p.w >= floor || p.w * p.v >= floor * mean);
        out.max_bins = out.max_bins.max(parts.len());
    }
    Ok(Some(out))
}

fn resolve_policy(model: &SchedulingModel, source: &PolicySource) -> Result<SchedulingPolicy> {
    match source {
        PolicySource::Fixed(p) => Ok(p.clone()),
        PolicySource::Resolve { grid, rvi: opts } => {
            let g = StateGrid::build(model, grid)?;
            let table = match rvi(&g, model, opts, None) {
                Ok(t) => t.minimizer,
                Err(Error::PossiblyUnstable { .. }) => {
                    // Fall back to the stage reached, read as a rolling-horizon table.
                    let short = RviOptions { max_iter: opts.max_iter.min(1000), tol: 0.0, ..opts.clone() };
                    let bell = crate::mdp::average_cost_bellman(&g, model)?;
                    let mut phi = vec![0.0; g.len()];
                    let mut arg = vec![0; g.len()];
                    for _ in 0..short.max_iter {
                        let (n, a) = crate::mdp::rvi_step(&bell, &phi);
                        phi = n;
                        arg = a;
                    }
                    arg
                }
                Err(e) => return Err(e),
            };
            Ok(SchedulingPolicy::Table(TablePolicy::from_grid(&g, &table, None)?))
        }
    }
}

/// Monte Carlo stability verdict for one loss-rate model.
///
/// Each replication estimates the expected cost `E[trace(W Sigma_t)]`, with W the stationary
/// Riccati weight, by propagating a binned random approximation of the covariance law. The
/// mean is tracked directly, so growth carried by rare long loss bursts is seen even though
/// individual paths stay bounded. Verdicts:
/// Unstable when a replication diverges, the escape share exceeds `ESCAPE_UNSTABLE`, or the
/// running-mean slope exceeds ten times its tolerance; Stable when the slope is within
/// tolerance and the escape share is negligible; Undetermined otherwise.
pub fn mc_stability_probe(model: &SchedulingModel, lambda: &[f64], opts: &ProbeOptions) -> Result<RegionSample> {
    if opts.horizon < 4 || opts.replications == 0 || !(opts.bin_ratio > 1.0) || !(opts.value_cap > 0.0) {
        return Err(Error::InvalidModel("probe needs horizon >= 4, a replication, bin ratio above 1 and a positive cap".into()));
    }
    let policy = resolve_policy(model, &opts.policy)?;
    let are = solve_are(&model.plant, 1.0)?;
    let weight = if are.pi_tilde.trace() > 1e-12 { are.pi_tilde } else { CovMatrix::identity(model.plant.dim()) };
    match Diagonal::detect(model, &weight) {
        Some(dy) => probe_with(&dy, model, &policy, lambda, opts),
        None => probe_with(&Dense { model, weight }, model, &policy, lambda, opts),
    }
}

fn probe_with<D: Dynamics>(dy: &D, model: &SchedulingModel, policy: &SchedulingPolicy, lambda: &[f64], opts: &ProbeOptions) -> Result<RegionSample> {
    let t_len = opts.horizon;
    let half = t_len / 2;
    let mut sum = vec![0.0; t_len];
    let mut stats = ProbeStats { horizon: t_len, ..Default::default() };
    for r in 0..opts.replications {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(r as u64);
        stats.replications += 1;
        match law_run(dy, model, policy, opts, &mut rng)? {
            Some(run) => {
                sum.iter_mut().zip(&run.est).for_each(|(a, b)| *a += b);
                let esc = run.escape[half..].iter().sum::<f64>() / (t_len - half) as f64;
                stats.escape = stats.escape.max(esc);
                stats.max_bins = stats.max_bins.max(run.max_bins);
                if esc > ESCAPE_UNSTABLE {
                    break;
                }
            }
            None => {
                stats.diverged += 1;
                break;
            }
        }
    }
    let verdict = if stats.diverged > 0 {
        stats.slope = f64::INFINITY;
        Verdict::Unstable
    } else {
        let mean: Vec<f64> = sum.iter().map(|v| v / stats.replications as f64).collect();
        let (slope, level) = running_mean_slope(&mean);
        stats.slope = slope;
        stats.level = level;
        stats.slope_tol = 1e-3 * level;
        if stats.escape > ESCAPE_UNSTABLE || slope > 10.0 * stats.slope_tol {
            Verdict::Unstable
        } else if slope <= stats.slope_tol && stats.escape <= ESCAPE_NEGLIGIBLE {
            Verdict::Stable
        } else {
            Verdict::Undetermined
        }
    };
    Ok(RegionSample { lambda: lambda.to_vec(), verdict, evidence: Evidence::MonteCarlo, details: SampleDetails::Probe(stats) })
}

/// Least-squares slope of the running mean over the second half, and the mean level there.
pub fn running_mean_slope(series: &[f64]) -> (f64, f64) {
    let n = series.len();
    let mut run = Vec::with_capacity(n);
    let mut acc = 0.0;
    for (i, v) in series.iter().enumerate() {
        acc += v;
        run.push(acc / (i + 1) as f64);
    }
    let lo = n / 2;
    let xs: Vec<f64> = (lo..n).map(|i| i as f64).collect();
    let ys = &run[lo..];
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let level = series[lo..].iter().sum::<f64>() / k;
    (sxy / sxx, level)
}

/// Source of verdicts for loss-rate vectors.
pub trait VerdictOracle: Sync {
    fn verdict(&self, lambda: &[f64]) -> Result<RegionSample>;
}

impl<F> VerdictOracle for F
where
    F: Fn(&[f64]) -> Result<RegionSample> + Sync,
{
    fn verdict(&self, lambda: &[f64]) -> Result<RegionSample> {
        self(lambda)
    }
}

/// Monte Carlo oracle over a family of models indexed by loss-rate vectors.
pub struct ProbeOracle<F> {
    pub family: F,
    pub options: ProbeOptions,
}

impl<F> VerdictOracle for ProbeOracle<F>
where
    F: Fn(&[f64]) -> Result<SchedulingModel> + Sync,
{
    fn verdict(&self, lambda: &[f64]) -> Result<RegionSample> {
        mc_stability_probe(&(self.family)(lambda)?, lambda, &self.options)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    /// Bracket width at which bisection stops, in ray scale units.
    pub tol: f64,
    /// Largest probed scale; loss rates must stay below one.
    pub edge: f64,
    pub max_probes_per_ray: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self { tol: 0.01, edge: 1.0 - 1e-6, max_probes_per_ray: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayResult {
    /// Direction with max-norm one.
    pub direction: Vec<f64>,
    /// Largest scale with a Stable verdict (0 when none was probed).
    pub stable_scale: f64,
    /// Smallest scale with an Unstable verdict.
    pub unstable_scale: Option<f64>,
    /// The ray edge itself was Stable.
    pub saturated: bool,
    pub samples: Vec<RegionSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub rays: Vec<RayResult>,
}

impl RegionMap {
    pub fn samples(&self) -> impl Iterator<Item = &RegionSample> {
        self.rays.iter().flat_map(|r| r.samples.iter())
    }
}

fn normalize_ray(d: &[f64]) -> Result<Vec<f64>> {
    if d.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidModel(format!("ray direction {d:?} must be nonnegative")));
    }
    let m = d.iter().copied().fold(0.0, f64::max);
    if m == 0.0 {
        return Err(Error::InvalidModel("ray direction is zero".into()));
    }
    Ok(d.iter().map(|v| v / m).collect())
}

fn bisect_ray(oracle: &dyn VerdictOracle, dir: Vec<f64>, opts: &MapOptions) -> Result<RayResult> {
    let edge = opts.edge;
    let first = oracle.verdict(&scaled(&dir, edge))?;
    if first.verdict == Verdict::Stable {
        return Ok(RayResult { direction: dir, stable_scale: edge, unstable_scale: None, saturated: true, samples: vec![first] });
    }
    let mut b = Bisection::new(0.0);
    b.record(edge, first);
    b.run(oracle, &dir, opts, opts.max_probes_per_ray.saturating_sub(1))?;
    Ok(b.finish(dir))
}

/// Narrows a known bracket on one ray: `stable` and `unstable` are scales whose verdicts were
/// already established by the caller.
pub fn bisect_bracket(oracle: &dyn VerdictOracle, direction: &[f64], stable: f64, unstable: f64, opts: &MapOptions) -> Result<RayResult> {
    if !(stable < unstable) {
        return Err(Error::InvalidModel(format!("bracket [{stable}, {unstable}] is empty")));
    }
    let dir = normalize_ray(direction)?;
    let mut b = Bisection::new(stable);
    b.hi = Some(unstable);
    b.run(oracle, &dir, opts, opts.max_probes_per_ray)?;
    Ok(b.finish(dir))
}

fn scaled(dir: &[f64], s: f64) -> Vec<f64> {
    dir.iter().map(|d| d * s).collect()
}

struct Bisection {
    lo: f64,
    hi: Option<f64>,
    und: Option<(f64, f64)>,
    samples: Vec<RegionSample>,
}

impl Bisection {
    fn new(lo: f64) -> Self {
        Self { lo, hi: None, und: None, samples: Vec::new() }
    }

    fn record(&mut self, s: f64, smp: RegionSample) {
        match smp.verdict {
            Verdict::Stable => self.lo = self.lo.max(s),
            Verdict::Unstable => self.hi = Some(self.hi.map_or(s, |h| h.min(s))),
            Verdict::Undetermined => self.und = Some(self.und.map_or((s, s), |(a, b)| (a.min(s), b.max(s)))),
        }
        self.samples.push(smp);
    }

    /// Next scale to probe: the gap below the undetermined band first, then the gap above it.
    fn next(&self, tol: f64, edge: f64) -> Option<f64> {
        let top = self.hi.unwrap_or(edge);
        match self.und {
            None if top - self.lo > tol => Some(0.5 * (self.lo + top)),
            Some((ul, _)) if ul - self.lo > tol => Some(0.5 * (self.lo + ul)),
            Some((_, uh)) if self.hi.is_some_and(|h| h - uh > tol) => Some(0.5 * (uh + top)),
            _ => None,
        }
    }

    fn run(&mut self, oracle: &dyn VerdictOracle, dir: &[f64], opts: &MapOptions, budget: usize) -> Result<()> {
        for _ in 0..budget {
            let Some(s) = self.next(opts.tol, opts.edge) else { break };
            let smp = oracle.verdict(&scaled(dir, s))?;
            self.record(s, smp);
        }
        Ok(())
    }

    fn finish(self, dir: Vec<f64>) -> RayResult {
        RayResult { direction: dir, stable_scale: self.lo, unstable_scale: self.hi, saturated: false, samples: self.samples }
    }
}

/// Brackets the stability boundary along each ray from the origin by bisection.
///
/// Fails with a consistency error when a Stable sample dominates an Unstable one
/// componentwise, which contradicts order-convexity of the region.
pub fn map_region(oracle: &dyn VerdictOracle, rays: &[Vec<f64>], opts: &MapOptions) -> Result<RegionMap> {
    let dirs = rays.iter().map(|r| normalize_ray(r)).collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<RayResult>> = dirs.into_par_iter().map(|d| bisect_ray(oracle, d, opts)).collect();
    let map = RegionMap { rays: results.into_iter().collect::<Result<_>>()? };
    let all: Vec<RegionSample> = map.samples().cloned().collect();
    check_order_convexity(&all)?;
    Ok(map)
}

pub fn check_order_convexity(samples: &[RegionSample]) -> Result<()> {
    for st in samples.iter().filter(|s| s.verdict == Verdict::Stable) {
        for un in samples.iter().filter(|s| s.verdict == Verdict::Unstable) {
            if st.lambda.iter().zip(&un.lambda).all(|(a, b)| a >= b) {
                return Err(Error::Consistency(format!(
                    "Stable at {:?} dominates Unstable at {:?}; increase replications",
                    st.lambda, un.lambda
                )));
            }
        }
    }
    Ok(())
}

/// Default ray directions in `[0, 1]^dim`: evenly spaced angles in two dimensions,
/// otherwise the axes, the diagonal, then quasi-random interior directions.
pub fn default_rays(dim: usize, count: usize) -> Vec<Vec<f64>> {
    match dim {
        0 => Vec::new(),
        1 => vec![vec![1.0]],
        2 => (0..count)
            .map(|i| {
                let ang = if count == 1 { std::f64::consts::FRAC_PI_4 } else { std::f64::consts::FRAC_PI_2 * i as f64 / (count - 1) as f64 };
                let (c, s) = (ang.cos(), ang.sin());
                let m = c.max(s);
                let snap = |v: f64| if (v - 1.0).abs() < 1e-12 { 1.0 } else if v.abs() < 1e-12 { 0.0 } else { v };
                vec![snap(c / m), snap(s / m)]
            })
            .collect(),
        _ => {
            let mut out: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
            out.push(vec![1.0; dim]);
            let primes = [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
            let mut k = 1;
            while out.len() < count {
                let v: Vec<f64> = (0..dim).map(|j| halton(k, primes[j % primes.len()])).collect();
                out.push(normalize_ray(&v).unwrap_or_else(|_| vec![1.0; dim]));
                k += 1;
            }
            out.truncate(count.max(1));
            out
        }
    }
}

fn halton(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}
