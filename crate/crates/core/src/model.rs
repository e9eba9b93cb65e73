//! Plant, network and cost data, with checks of the standing assumptions.

use std::collections::VecDeque;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psd::{min_eig_sym, CovMatrix};

/// Observation matrices for one (query, network state) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub c: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl Sensor {
    pub fn new(c: DMatrix<f64>, f: DMatrix<f64>) -> Self {
        Self { c, f }
    }
}

/// Linear-Gaussian plant `X' = A X + B U + D W`, `Y = C X + F W`,
/// with quadratic state and control weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    r: CovMatrix,
    m: CovMatrix,
    /// Indexed `[q][s]`. A length-one inner list applies to every network state.
    sensors: Vec<Vec<Sensor>>,
    dd_t: CovMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stabilizability {
    pub holds: bool,
    /// Eigenvalues (re, im) with modulus >= 1 at which the rank test fails.
    pub failing_eigenvalues: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub stabilizable: Stabilizability,
    pub controllable: bool,
    pub detectable: Stabilizability,
    pub warnings: Vec<String>,
}

const RANK_TOL: f64 = 1e-9;
const EIG_RANK_TOL: f64 = 1e-7;

fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > rel_tol * top.max(1.0)).count()
}

/// Rank of a complex matrix through its real embedding, halved.
fn complex_rank(re: &DMatrix<f64>, im: &DMatrix<f64>, rel_tol: f64) -> usize {
    let (r, c) = re.shape();
    let mut big = DMatrix::zeros(2 * r, 2 * c);
    big.view_mut((0, 0), (r, c)).copy_from(re);
    big.view_mut((0, c), (r, c)).copy_from(&(-im));
    big.view_mut((r, 0), (r, c)).copy_from(im);
    big.view_mut((r, c), (r, c)).copy_from(re);
    numerical_rank(&big, rel_tol) / 2
}

fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    a.clone().complex_eigenvalues().iter().copied().collect()
}

/// PBH test: rank [lambda I - A | B] = d at every eigenvalue with |lambda| >= 1.
pub fn check_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Stabilizability> {
    let d = a.nrows();
    if !a.is_square() || b.nrows() != d {
        return Err(Error::Dimension(format!(
            "A is {}x{}, B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let mut failing = Vec::new();
    for ev in eigenvalues(a) {
        if ev.norm() < 1.0 - 1e-12 {
            continue;
        }
        let m = b.ncols();
        let mut re = DMatrix::zeros(d, d + m);
        let mut im = DMatrix::zeros(d, d + m);
        let shifted = DMatrix::identity(d, d) * ev.re - a;
        re.view_mut((0, 0), (d, d)).copy_from(&shifted);
        im.view_mut((0, 0), (d, d)).copy_from(&(DMatrix::identity(d, d) * ev.im));
        re.view_mut((0, d), (d, m)).copy_from(b);
        if complex_rank(&re, &im, EIG_RANK_TOL) < d {
            failing.push((ev.re, ev.im));
        }
    }
    Ok(Stabilizability { holds: failing.is_empty(), failing_eigenvalues: failing })
}

/// Kalman rank test on [D | AD | ... | A^{d-1} D].
pub fn check_controllable(a: &DMatrix<f64>, dmat: &DMatrix<f64>) -> Result<bool> {
    let d = a.nrows();
    if !a.is_square() || dmat.nrows() != d {
        return Err(Error::Dimension(format!(
            "A is {}x{}, D has {} rows",
            a.nrows(),
            a.ncols(),
            dmat.nrows()
        )));
    }
    let w = dmat.ncols();
    let mut ctrb = DMatrix::zeros(d, d * w);
    let mut blk = dmat.clone();
    for k in 0..d {
        ctrb.view_mut((0, k * w), (d, w)).copy_from(&blk);
        blk = a * blk;
    }
    Ok(numerical_rank(&ctrb, RANK_TOL) == d)
}

impl PlantModel {
    /// Builds a plant and enforces every assumption, including stabilizability
    /// of (A, B) and controllability of (A, D).
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        r: CovMatrix,
        m: CovMatrix,
        sensors: Vec<Vec<Sensor>>,
    ) -> Result<Self> {
        let p = Self::new_structural(a, b, d, r, m, sensors)?;
        let rep = p.assumptions()?;
        if !rep.stabilizable.holds {
            return Err(Error::InvalidModel(format!(
                "(A, B) is not stabilizable; failing eigenvalues {:?}",
                rep.stabilizable.failing_eigenvalues
            )));
        }
        if !rep.controllable {
            return Err(Error::InvalidModel("(A, D) is not controllable".into()));
        }
        Ok(p)
    }

    /// Checks dimensions, definiteness of R and M, and the sensor noise conditions,
    /// but not stabilizability or controllability.
    pub fn new_structural(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        r: CovMatrix,
        m: CovMatrix,
        sensors: Vec<Vec<Sensor>>,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::Dimension(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if d.nrows() != n {
            return Err(Error::Dimension(format!("D has {} rows, expected {n}", d.nrows())));
        }
        if r.dim() != n {
            return Err(Error::Dimension(format!("R is {}x{0}, expected {n}x{n}", r.dim())));
        }
        if m.dim() != b.ncols() {
            return Err(Error::Dimension(format!("M is {}x{0}, expected {1}x{1}", m.dim(), b.ncols())));
        }
        if min_eig_sym(r.matrix())? <= 1e-12 * r.trace() {
            return Err(Error::InvalidModel("R must be positive definite".into()));
        }
        if m.dim() > 0 && min_eig_sym(m.matrix())? <= 1e-12 * m.trace() {
            return Err(Error::InvalidModel("M must be positive definite".into()));
        }
        if sensors.is_empty() {
            return Err(Error::InvalidModel("at least one query is required".into()));
        }
        let dw = d.ncols();
        for (q, per_s) in sensors.iter().enumerate() {
            if per_s.is_empty() {
                return Err(Error::InvalidModel(format!("sensors[{q}] is empty")));
            }
            for (s, sen) in per_s.iter().enumerate() {
                let at = format!("sensors[{q}][{s}]");
                if sen.c.ncols() != n {
                    return Err(Error::Dimension(format!("{at}.C has {} columns, expected {n}", sen.c.ncols())));
                }
                if sen.f.ncols() != dw {
                    return Err(Error::Dimension(format!("{at}.F has {} columns, expected {dw}", sen.f.ncols())));
                }
                if sen.f.nrows() != sen.c.nrows() {
                    return Err(Error::Dimension(format!(
                        "{at}: C has {} rows but F has {}",
                        sen.c.nrows(),
                        sen.f.nrows()
                    )));
                }
                let fft = &sen.f * sen.f.transpose();
                let scale = fft.norm().max(1e-300);
                if numerical_rank(&fft, 1e-12) < fft.nrows() || fft.determinant().abs() <= 1e-14 * scale.powi(fft.nrows() as i32) {
                    return Err(Error::InvalidModel(format!("{at}: F F^T is singular")));
                }
                let cross = &d * sen.f.transpose();
                if cross.norm() > 1e-12 * (1.0 + d.norm() * sen.f.norm()) {
                    return Err(Error::InvalidModel(format!(
                        "{at}: D F^T must vanish (process and measurement noise independent), norm {:e}",
                        cross.norm()
                    )));
                }
            }
        }
        let dd_t = CovMatrix::from_sym_unchecked(&d * d.transpose());
        Ok(Self { a, b, d, r, m, sensors, dd_t })
    }

    pub fn assumptions(&self) -> Result<AssumptionReport> {
        let stabilizable = check_stabilizable(&self.a, &self.b)?;
        let controllable = check_controllable(&self.a, &self.d)?;
        let cbar = self.stacked_c();
        let detectable = check_stabilizable(&self.a.transpose(), &cbar.transpose())?;
        let mut warnings = Vec::new();
        if !detectable.holds {
            warnings.push(format!(
                "(C, A) with all sensors stacked is not detectable; unstable modes {:?} are unobservable",
                detectable.failing_eigenvalues
            ));
        }
        Ok(AssumptionReport { stabilizable, controllable, detectable, warnings })
    }

    fn stacked_c(&self) -> DMatrix<f64> {
        let rows: usize = self.sensors.iter().flatten().map(|s| s.c.nrows()).sum();
        let mut out = DMatrix::zeros(rows, self.dim());
        let mut at = 0;
        for s in self.sensors.iter().flatten() {
            out.view_mut((at, 0), (s.c.nrows(), self.dim())).copy_from(&s.c);
            at += s.c.nrows();
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn noise_dim(&self) -> usize {
        self.d.ncols()
    }
    pub fn num_queries(&self) -> usize {
        self.sensors.len()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn r(&self) -> &CovMatrix {
        &self.r
    }
    pub fn m(&self) -> &CovMatrix {
        &self.m
    }
    pub fn dd_t(&self) -> &CovMatrix {
        &self.dd_t
    }
    pub fn sensors(&self) -> &[Vec<Sensor>] {
        &self.sensors
    }

    /// Sensor for query `q` in network state `s`.
    pub fn sensor(&self, q: usize, s: usize) -> &Sensor {
        let v = &self.sensors[q];
        if v.len() == 1 {
            &v[0]
        } else {
            &v[s]
        }
    }

    /// Same plant with query labels permuted: new query `i` is old query `perm[i]`.
    pub fn permute_queries(&self, perm: &[usize]) -> Self {
        let mut p = self.clone();
        p.sensors = perm.iter().map(|&i| self.sensors[i].clone()).collect();
        p
    }
}

/// Markov-modulated network with query-dependent transitions, loss rates and costs.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    /// One N x N row-stochastic matrix per query.
    p: Vec<DMatrix<f64>>,
    /// Indexed `[s][q]`.
    loss: Vec<Vec<f64>>,
    /// Indexed `[s][q]`.
    net_cost: Vec<Vec<f64>>,
    s_circ: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minorization {
    pub theta: f64,
    pub p_tilde: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MinorizationFailure {
    /// Entrywise minimum over queries has an all-zero row.
    ZeroRow { state: usize },
    /// The normalized minimum kernel is not irreducible.
    Reducible { unreachable_from: usize, target: usize },
}

impl std::fmt::Display for MinorizationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::ZeroRow { state } => write!(f, "min over queries of P_q has a zero row at state {state}"),
            Self::Reducible { unreachable_from, target } => write!(
                f,
                "normalized minimum kernel is reducible: state {target} unreachable from {unreachable_from}"
            ),
        }
    }
}

impl NetworkModel {
    /// `s_circ` of `None` selects the lowest-index state attaining the minimum network cost.
    pub fn new(
        p: Vec<DMatrix<f64>>,
        loss: Vec<Vec<f64>>,
        net_cost: Vec<Vec<f64>>,
        s_circ: Option<usize>,
    ) -> Result<Self> {
        let nq = p.len();
        if nq == 0 {
            return Err(Error::InvalidModel("P: at least one query is required".into()));
        }
        let n = p[0].nrows();
        if n == 0 {
            return Err(Error::InvalidModel("P[0]: at least one network state is required".into()));
        }
        for (q, pq) in p.iter().enumerate() {
            if pq.nrows() != n || pq.ncols() != n {
                return Err(Error::Dimension(format!("P[{q}] is {}x{}, expected {n}x{n}", pq.nrows(), pq.ncols())));
            }
            for i in 0..n {
                let row = pq.row(i);
                if let Some(j) = (0..n).find(|&j| !(row[j] >= 0.0) || !row[j].is_finite()) {
                    return Err(Error::InvalidModel(format!("P[{q}] entry ({i}, {j}) = {} is not a probability", row[j])));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidModel(format!("P[{q}] row {i} sums to {sum}")));
                }
            }
        }
        check_table("loss", &loss, n, nq)?;
        check_table("net_cost", &net_cost, n, nq)?;
        for (s, row) in loss.iter().enumerate() {
            for (q, &l) in row.iter().enumerate() {
                if !(0.0..1.0).contains(&l) {
                    return Err(Error::InvalidModel(format!("loss[{s}][{q}] = {l} is outside [0, 1)")));
                }
            }
        }
        let row_min = |s: usize| net_cost[s].iter().copied().fold(f64::INFINITY, f64::min);
        let mut best = 0;
        for s in 1..n {
            if row_min(s) < row_min(best) {
                best = s;
            }
        }
        let s_circ = match s_circ {
            None => best,
            Some(s) if s >= n => {
                return Err(Error::InvalidModel(format!("s_circ = {s} is not a network state")))
            }
            Some(s) if row_min(s) > row_min(best) => {
                return Err(Error::InvalidModel(format!(
                    "s_circ = {s} does not attain the minimum network cost {}",
                    row_min(best)
                )))
            }
            Some(s) => s,
        };
        if let Some(q) = (0..nq).find(|&q| net_cost[s_circ][q] < 0.0) {
            return Err(Error::InvalidModel(format!(
                "net_cost[{s_circ}][{q}] = {} must be nonnegative at the reference state",
                net_cost[s_circ][q]
            )));
        }
        Ok(Self { p, loss, net_cost, s_circ })
    }

    /// Single-state network with the given per-query loss rates and zero network cost.
    pub fn single_state(loss: &[f64]) -> Result<Self> {
        let nq = loss.len();
        Self::new(
            vec![DMatrix::from_element(1, 1, 1.0); nq],
            vec![loss.to_vec()],
            vec![vec![0.0; nq]],
            None,
        )
    }

    pub fn num_states(&self) -> usize {
        self.p[0].nrows()
    }
    pub fn num_queries(&self) -> usize {
        self.p.len()
    }
    pub fn transition(&self, q: usize) -> &DMatrix<f64> {
        &self.p[q]
    }
    pub fn prob(&self, q: usize, s: usize, s_next: usize) -> f64 {
        self.p[q][(s, s_next)]
    }
    pub fn loss(&self, s: usize, q: usize) -> f64 {
        self.loss[s][q]
    }
    pub fn loss_table(&self) -> &[Vec<f64>] {
        &self.loss
    }
    pub fn net_cost(&self, s: usize, q: usize) -> f64 {
        self.net_cost[s][q]
    }
    pub fn net_cost_table(&self) -> &[Vec<f64>] {
        &self.net_cost
    }
    pub fn s_circ(&self) -> usize {
        self.s_circ
    }

    /// Same network with the loss table replaced.
    pub fn with_loss(&self, loss: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.p.clone(), loss, self.net_cost.clone(), Some(self.s_circ))
    }

    /// Same network with query labels permuted: new query `i` is old query `perm[i]`.
    pub fn permute_queries(&self, perm: &[usize]) -> Self {
        Self {
            p: perm.iter().map(|&i| self.p[i].clone()).collect(),
            loss: self.loss.iter().map(|r| perm.iter().map(|&i| r[i]).collect()).collect(),
            net_cost: self.net_cost.iter().map(|r| perm.iter().map(|&i| r[i]).collect()).collect(),
            s_circ: self.s_circ,
        }
    }
}

fn check_table(name: &str, t: &[Vec<f64>], n: usize, nq: usize) -> Result<()> {
    if t.len() != n {
        return Err(Error::Dimension(format!("{name} has {} rows, expected {n}", t.len())));
    }
    for (s, row) in t.iter().enumerate() {
        if row.len() != nq {
            return Err(Error::Dimension(format!("{name}[{s}] has {} entries, expected {nq}", row.len())));
        }
        if let Some(q) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidModel(format!("{name}[{s}][{q}] is not finite")));
        }
    }
    Ok(())
}

/// Entrywise-minimum minorization certificate `p_q >= theta * p_tilde` for all q.
///
/// This is a sufficient construction only; failure does not prove that no
/// other minorizing kernel exists.
pub fn check_minorization(net: &NetworkModel) -> std::result::Result<Minorization, MinorizationFailure> {
    let n = net.num_states();
    let m = DMatrix::from_fn(n, n, |i, j| {
        (0..net.num_queries()).map(|q| net.prob(q, i, j)).fold(f64::INFINITY, f64::min)
    });
    let mut theta = f64::INFINITY;
    let mut p_tilde = vec![vec![0.0; n]; n];
    for i in 0..n {
        let sum: f64 = m.row(i).iter().sum();
        if sum <= 0.0 {
            return Err(MinorizationFailure::ZeroRow { state: i });
        }
        theta = theta.min(sum);
        for j in 0..n {
            p_tilde[i][j] = m[(i, j)] / sum;
        }
    }
    for start in 0..n {
        let mut seen = vec![false; n];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if p_tilde[i][j] > 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if let Some(target) = seen.iter().position(|v| !v) {
            return Err(MinorizationFailure::Reducible { unreachable_from: start, target });
        }
    }
    Ok(Minorization { theta: theta.min(1.0), p_tilde })
}

/// A plant and network that agree on the query set and network states.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulingModel {
    pub plant: PlantModel,
    pub network: NetworkModel,
}

impl SchedulingModel {
    pub fn new(plant: PlantModel, network: NetworkModel) -> Result<Self> {
        if plant.num_queries() != network.num_queries() {
            return Err(Error::Dimension(format!(
                "plant has {} queries, network has {}",
                plant.num_queries(),
                network.num_queries()
            )));
        }
        let n = network.num_states();
        for (q, per_s) in plant.sensors().iter().enumerate() {
            if per_s.len() != 1 && per_s.len() != n {
                return Err(Error::Dimension(format!(
                    "sensors[{q}] lists {} network states, expected 1 or {n}",
                    per_s.len()
                )));
            }
        }
        Ok(Self { plant, network })
    }

    pub fn num_queries(&self) -> usize {
        self.network.num_queries()
    }
    pub fn num_states(&self) -> usize {
        self.network.num_states()
    }

    pub fn permute_queries(&self, perm: &[usize]) -> Self {
        Self {
            plant: self.plant.permute_queries(perm),
            network: self.network.permute_queries(perm),
        }
    }
}

/// Scalar plant `x' = a x + u + w1`, observed by sensors `y = x + f_q w2`.
///
/// Process and measurement noise use separate coordinates of W so that
/// the independence condition D F^T = 0 holds.
pub fn scalar_plant(a: f64, f_values: &[f64]) -> Result<PlantModel> {
    let sensors = f_values
        .iter()
        .map(|&f| {
            vec![Sensor::new(
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_row_slice(1, 2, &[0.0, f]),
            )]
        })
        .collect();
    PlantModel::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        CovMatrix::identity(1),
        CovMatrix::identity(1),
        sensors,
    )
}

/// Diagonal plant `x_i' = a_i x_i + u_i + w_i` where query `i` observes coordinate `i`
/// with noise scale `f_i`.
pub fn diagonal_plant(a: &[f64], f_values: &[f64]) -> Result<PlantModel> {
    let n = a.len();
    if f_values.len() != n {
        return Err(Error::Dimension(format!("{} noise scales for {n} coordinates", f_values.len())));
    }
    let mut dmat = DMatrix::zeros(n, 2 * n);
    for i in 0..n {
        dmat[(i, i)] = 1.0;
    }
    let sensors = (0..n)
        .map(|i| {
            let mut c = DMatrix::zeros(1, n);
            c[(0, i)] = 1.0;
            let mut f = DMatrix::zeros(1, 2 * n);
            f[(0, n + i)] = f_values[i];
            vec![Sensor::new(c, f)]
        })
        .collect();
    PlantModel::new(
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(a)),
        DMatrix::identity(n, n),
        dmat,
        CovMatrix::identity(n),
        CovMatrix::identity(n),
        sensors,
    )
}
