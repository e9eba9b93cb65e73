//! Finite approximation of the (network state, covariance) space by reachable-set closure.

use std::collections::{BTreeMap, VecDeque};

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use super::kdtree::{features, KdTree};
use crate::error::{Error, Result};
use crate::kernel::{branches, t_q};
use crate::model::SchedulingModel;
use crate::psd::CovMatrix;

/// Smallest merge radius; no two stored covariances in one network state are closer.
pub const MIN_SEPARATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Trace truncation radius. `None` selects 50 times the smallest lossless
    /// steady-state trace over single sensors at the reference network state.
    pub r_max: Option<f64>,
    pub max_states: usize,
    /// Relative merge radius: a new covariance within `resolution * (1 + trace)` of a
    /// stored one in the same network state is not added.
    pub resolution: f64,
    /// Expansion depth limit from the seed layer.
    pub max_depth: Option<usize>,
    /// Extra seed covariances; zero is always a seed.
    #[serde(default)]
    pub seeds: Vec<CovMatrix>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { r_max: None, max_states: 200_000, resolution: 1e-3, max_depth: None, seeds: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct StateGrid {
    net_state: Vec<usize>,
    covs: Vec<CovMatrix>,
    depth: Vec<usize>,
    r_max: f64,
    resolution: f64,
    theta_id: usize,
    num_queries: usize,
    /// CSR successor table indexed by `z * num_queries + q`.
    offsets: Vec<usize>,
    targets: Vec<u32>,
    probs: Vec<f64>,
    /// Probability mass that left the trace ball and was projected back, per (z, q).
    boundary: Vec<f64>,
    max_projection: f64,
    trees: Vec<KdTree>,
}

/// Trace of the fixed point of the lossless update for query `q` at network state `s`.
pub fn lossless_steady_trace(model: &SchedulingModel, q: usize, s: usize) -> Result<f64> {
    let mut sig = CovMatrix::zeros(model.plant.dim());
    for _ in 0..100_000 {
        let next = t_q(&model.plant, q, s, &sig)?;
        let gap = next.frobenius_dist(&sig);
        sig = next;
        if gap <= 1e-12 * (1.0 + sig.trace()) {
            return Ok(sig.trace());
        }
    }
    Err(Error::Convergence { iterations: 100_000, residual: f64::NAN })
}

pub fn default_r_max(model: &SchedulingModel) -> Result<f64> {
    let s = model.network.s_circ();
    let mut best = f64::INFINITY;
    for q in 0..model.num_queries() {
        if let Ok(t) = lossless_steady_trace(model, q, s) {
            best = best.min(t);
        }
    }
    if !best.is_finite() {
        return Err(Error::InvalidModel("no single sensor has a finite lossless steady state; set r_max explicitly".into()));
    }
    Ok(50.0 * best)
}

struct Dedup {
    /// Per network state: trace -> ids with that trace.
    by_trace: Vec<BTreeMap<OrderedFloat<f64>, Vec<usize>>>,
    dim: usize,
}

impl Dedup {
    fn find(&self, covs: &[CovMatrix], s: usize, c: &CovMatrix, radius: f64) -> Option<usize> {
        let tr = c.trace();
        let w = radius * (self.dim as f64).sqrt();
        let mut best: Option<(usize, f64)> = None;
        for (_, ids) in self.by_trace[s].range(OrderedFloat(tr - w)..=OrderedFloat(tr + w)) {
            for &id in ids {
                let d = covs[id].frobenius_dist(c);
                if d <= radius && best.is_none_or(|(b, bd)| d < bd || (d == bd && id < b)) {
                    best = Some((id, d));
                }
            }
        }
        best.map(|b| b.0)
    }

    fn insert(&mut self, s: usize, c: &CovMatrix, id: usize) {
        self.by_trace[s].entry(OrderedFloat(c.trace())).or_default().push(id);
    }
}

fn merge_radius(resolution: f64, c: &CovMatrix) -> f64 {
    (resolution * (1.0 + c.trace())).max(MIN_SEPARATION)
}

struct Closure {
    net_state: Vec<usize>,
    covs: Vec<CovMatrix>,
    depth: Vec<usize>,
    dedup: Dedup,
    queue: VecDeque<usize>,
    r_max: f64,
    resolution: f64,
    max_states: usize,
}

impl Closure {
    fn push(&mut self, s: usize, c: CovMatrix, depth: usize) -> Result<()> {
        if c.trace() > self.r_max || self.dedup.find(&self.covs, s, &c, merge_radius(self.resolution, &c)).is_some() {
            return Ok(());
        }
        let id = self.covs.len();
        if id >= self.max_states {
            return Err(Error::GridOverflow { max_states: self.max_states });
        }
        self.dedup.insert(s, &c, id);
        self.net_state.push(s);
        self.covs.push(c);
        self.depth.push(depth);
        self.queue.push_back(id);
        Ok(())
    }
}

impl StateGrid {
    pub fn build(model: &SchedulingModel, opts: &GridOptions) -> Result<Self> {
        let r_max = match opts.r_max {
            Some(r) if r > 0.0 => r,
            Some(r) => return Err(Error::InvalidModel(format!("r_max = {r} must be positive"))),
            None => default_r_max(model)?,
        };
        if !(opts.resolution >= 0.0) {
            return Err(Error::InvalidModel("resolution must be nonnegative".into()));
        }
        let d = model.plant.dim();
        let n_net = model.num_states();
        let nq = model.num_queries();

        let mut seeds = vec![CovMatrix::zeros(d)];
        for sd in &opts.seeds {
            if sd.dim() != d {
                return Err(Error::Dimension(format!("seed is {}x{0}, plant is {1}x{1}", sd.dim(), d)));
            }
            seeds.push(sd.clone());
        }
        let mut b = Closure {
            net_state: Vec::new(),
            covs: Vec::new(),
            depth: Vec::new(),
            dedup: Dedup { by_trace: vec![BTreeMap::new(); n_net], dim: d },
            queue: VecDeque::new(),
            r_max,
            resolution: opts.resolution,
            max_states: opts.max_states,
        };
        for sd in &seeds {
            for s in 0..n_net {
                b.push(s, sd.clone(), 0)?;
            }
        }
        while let Some(id) = b.queue.pop_front() {
            if opts.max_depth.is_some_and(|m| b.depth[id] >= m) {
                continue;
            }
            let (s, c, dep) = (b.net_state[id], b.covs[id].clone(), b.depth[id]);
            for q in 0..nq {
                for br in branches(model, s, &c, q)? {
                    b.push(br.next_net_state, br.next_cov, dep + 1)?;
                }
            }
        }
        let Closure { net_state, covs, depth, .. } = b;

        let dim_f = d * (d + 1) / 2;
        let mut per_net: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); n_net];
        for (id, c) in covs.iter().enumerate() {
            per_net[net_state[id]].push((id, features(c)));
        }
        let trees: Vec<KdTree> = per_net.into_iter().map(|p| KdTree::build(dim_f, p)).collect();
        let theta_id = (0..covs.len())
            .find(|&i| net_state[i] == model.network.s_circ() && covs[i].trace() == 0.0)
            .expect("zero seed is always stored");

        let mut grid = Self {
            net_state,
            covs,
            depth,
            r_max,
            resolution: opts.resolution,
            theta_id,
            num_queries: nq,
            offsets: vec![0],
            targets: Vec::new(),
            probs: Vec::new(),
            boundary: Vec::new(),
            max_projection: 0.0,
            trees,
        };
        grid.build_successors(model)?;
        Ok(grid)
    }

    fn build_successors(&mut self, model: &SchedulingModel) -> Result<()> {
        let n = self.covs.len();
        let mut row: Vec<(u32, f64)> = Vec::new();
        for z in 0..n {
            for q in 0..self.num_queries {
                row.clear();
                let mut out_mass = 0.0;
                for b in branches(model, self.net_state[z], &self.covs[z], q)? {
                    let (t, dist) = self.nearest_with_dist(b.next_net_state, &b.next_cov);
                    if b.next_cov.trace() > self.r_max {
                        out_mass += b.probability;
                    } else {
                        self.max_projection = self.max_projection.max(dist);
                    }
                    match row.iter_mut().find(|e| e.0 as usize == t) {
                        Some(e) => e.1 += b.probability,
                        None => row.push((t as u32, b.probability)),
                    }
                }
                row.sort_by_key(|e| e.0);
                for &(t, p) in &row {
                    self.targets.push(t);
                    self.probs.push(p);
                }
                self.offsets.push(self.targets.len());
                self.boundary.push(out_mass);
            }
        }
        Ok(())
    }

    fn nearest_with_dist(&self, s: usize, c: &CovMatrix) -> (usize, f64) {
        let (id, d2) = self.trees[s].nearest(&features(c)).expect("every network state holds its zero covariance");
        (id, d2.sqrt())
    }

    /// Nearest stored covariance in network state `s`; ties go to the lower id.
    pub fn nearest(&self, s: usize, c: &CovMatrix) -> usize {
        self.nearest_with_dist(s, c).0
    }

    /// Id of a stored state within the merge radius of `(s, c)`, if any.
    pub fn lookup(&self, s: usize, c: &CovMatrix) -> Option<usize> {
        if s >= self.trees.len() {
            return None;
        }
        let (id, d) = self.nearest_with_dist(s, c);
        (d <= merge_radius(self.resolution, c)).then_some(id)
    }

    pub fn len(&self) -> usize {
        self.covs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.covs.is_empty()
    }
    pub fn num_queries(&self) -> usize {
        self.num_queries
    }
    pub fn num_net_states(&self) -> usize {
        self.trees.len()
    }
    pub fn net_state(&self, z: usize) -> usize {
        self.net_state[z]
    }
    pub fn cov(&self, z: usize) -> &CovMatrix {
        &self.covs[z]
    }
    /// Expansion depth at which the state was first reached.
    pub fn depth(&self, z: usize) -> usize {
        self.depth[z]
    }
    pub fn r_max(&self) -> f64 {
        self.r_max
    }
    pub fn resolution(&self) -> f64 {
        self.resolution
    }
    pub fn theta_id(&self) -> usize {
        self.theta_id
    }
    /// Largest projection distance of an in-ball successor onto the grid.
    pub fn max_projection(&self) -> f64 {
        self.max_projection
    }
    /// Probability that querying `q` from `z` leaves the trace ball.
    pub fn boundary_mass(&self, z: usize, q: usize) -> f64 {
        self.boundary[z * self.num_queries + q]
    }

    /// Successor ids and probabilities under query `q`.
    pub fn successors(&self, z: usize, q: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let k = z * self.num_queries + q;
        let r = self.offsets[k]..self.offsets[k + 1];
        self.targets[r.clone()].iter().map(|&t| t as usize).zip(self.probs[r].iter().copied())
    }

    /// `sum_j p(z, q, j) f[j]`.
    pub fn expect(&self, z: usize, q: usize, f: &[f64]) -> f64 {
        let k = z * self.num_queries + q;
        let (a, b) = (self.offsets[k], self.offsets[k + 1]);
        self.targets[a..b].iter().zip(&self.probs[a..b]).map(|(&t, &p)| p * f[t as usize]).sum()
    }
}
