//! Model configuration files.

use std::path::Path;

use netsched::mdp::{GridOptions, RviOptions, RVI_MAX_ITER, RVI_TOL};
use netsched::model::{NetworkModel, PlantModel, SchedulingModel, Sensor};
use netsched::{matrix_from_rows, CovMatrix};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

type Rows = Vec<Vec<f64>>;

/// Invalid configuration, with the offending location in the file.
#[derive(Debug, thiserror::Error)]
#[error("{path} {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

fn err(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    #[serde(rename = "C")]
    pub c: Rows,
    #[serde(rename = "F")]
    pub f: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "D")]
    pub d: Rows,
    #[serde(rename = "R")]
    pub r: Rows,
    #[serde(rename = "M")]
    pub m: Rows,
    /// Indexed `[q][s]`; a single entry for a query applies to every network state.
    pub sensors: Vec<Vec<SensorConfig>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub queries: usize,
    #[serde(rename = "P")]
    pub p: Vec<Rows>,
    /// Loss rates indexed `[s][q]`.
    pub lambda: Rows,
    /// Network costs indexed `[s][q]`; zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net_cost: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_circ: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub alpha: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub r_max: Option<f64>,
    pub max_states: Option<usize>,
    pub resolution: Option<f64>,
    pub max_depth: Option<usize>,
    /// Extra grid seed covariances.
    #[serde(default)]
    pub seeds: Vec<Rows>,
    /// Run relative value iteration without a minorization certificate.
    #[serde(default)]
    pub allow_uncertified: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(rename = "T")]
    pub horizon: Option<usize>,
    pub replications: Option<usize>,
    pub base_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub plant: PlantConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sim: SimConfig,
}

fn matrix(path: &str, rows: &Rows, shape: (Option<usize>, Option<usize>)) -> Result<DMatrix<f64>, ConfigError> {
    if let Some(nr) = shape.0 {
        if rows.len() != nr {
            return Err(err(path, format!("has {} rows, expected {nr}", rows.len())));
        }
    }
    let nc = shape.1.or_else(|| rows.first().map(Vec::len)).unwrap_or(0);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != nc {
            return Err(err(format!("{path} row {i}"), format!("has {} entries, expected {nc}", r.len())));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(err(format!("{path}[{i}][{j}]"), "is not finite"));
        }
    }
    matrix_from_rows(rows).map_err(|e| err(path, format!("is invalid: {e}")))
}

fn cov(path: &str, rows: &Rows, d: usize) -> Result<CovMatrix, ConfigError> {
    CovMatrix::new(matrix(path, rows, (Some(d), Some(d)))?).map_err(|e| err(path, format!("is invalid: {e}")))
}

fn table(path: &str, rows: &Rows, n: usize, nq: usize) -> Result<(), ConfigError> {
    matrix(path, rows, (Some(n), Some(nq))).map(|_| ())
}

impl ModelConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| err(path.display().to_string(), format!("cannot be read: {e}")))?;
        Ok(Self::parse(&text)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| err(format!("config line {} column {}", e.line(), e.column()), format!("is malformed: {e}")))
    }

    pub fn plant(&self) -> Result<PlantModel, ConfigError> {
        let p = &self.plant;
        if p.a.is_empty() {
            return Err(err("plant.A", "is empty"));
        }
        let d = p.a.len();
        let a = matrix("plant.A", &p.a, (Some(d), Some(d)))?;
        let b = matrix("plant.B", &p.b, (Some(d), None))?;
        let dm = matrix("plant.D", &p.d, (Some(d), None))?;
        let r = cov("plant.R", &p.r, d)?;
        let m = cov("plant.M", &p.m, b.ncols())?;
        if p.sensors.len() != self.network.queries {
            return Err(err("plant.sensors", format!("has {} queries, network.queries is {}", p.sensors.len(), self.network.queries)));
        }
        let mut sensors = Vec::with_capacity(p.sensors.len());
        for (q, per_s) in p.sensors.iter().enumerate() {
            if per_s.len() != 1 && per_s.len() != self.network.n {
                return Err(err(format!("plant.sensors[{q}]"), format!("has {} entries, expected 1 or N = {}", per_s.len(), self.network.n)));
            }
            let mut row = Vec::with_capacity(per_s.len());
            for (s, sc) in per_s.iter().enumerate() {
                let at = format!("plant.sensors[{q}][{s}]");
                let c = matrix(&format!("{at}.C"), &sc.c, (None, Some(d)))?;
                let f = matrix(&format!("{at}.F"), &sc.f, (Some(c.nrows()), Some(dm.ncols())))?;
                row.push(Sensor::new(c, f));
            }
            sensors.push(row);
        }
        PlantModel::new(a, b, dm, r, m, sensors).map_err(|e| err("plant", format!("is invalid: {e}")))
    }

    pub fn network(&self) -> Result<NetworkModel, ConfigError> {
        let nw = &self.network;
        let (n, nq) = (nw.n, nw.queries);
        if n == 0 || nq == 0 {
            return Err(err("network", "needs positive N and queries"));
        }
        if nw.p.len() != nq {
            return Err(err("network.P", format!("has {} matrices, expected one per query ({nq})", nw.p.len())));
        }
        let mut p = Vec::with_capacity(nq);
        for (q, rows) in nw.p.iter().enumerate() {
            let at = format!("network.P[{q}]");
            let m = matrix(&at, rows, (Some(n), Some(n)))?;
            for i in 0..n {
                if let Some(j) = (0..n).find(|&j| !(0.0..=1.0).contains(&m[(i, j)])) {
                    return Err(err(format!("{at}[{i}][{j}]"), format!("= {} is not a probability", m[(i, j)])));
                }
                let sum: f64 = m.row(i).iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(err(format!("{at} row {i}"), format!("sums to {sum}")));
                }
            }
            p.push(m);
        }
        table("network.lambda", &nw.lambda, n, nq)?;
        for (s, row) in nw.lambda.iter().enumerate() {
            if let Some(q) = row.iter().position(|l| !(0.0..1.0).contains(l)) {
                return Err(err(format!("network.lambda[{s}][{q}]"), format!("= {} is outside [0, 1)", row[q])));
            }
        }
        let cost = nw.net_cost.clone().unwrap_or_else(|| vec![vec![0.0; nq]; n]);
        table("network.net_cost", &cost, n, nq)?;
        NetworkModel::new(p, nw.lambda.clone(), cost, nw.s_circ).map_err(|e| err("network", format!("is invalid: {e}")))
    }

    pub fn model(&self) -> Result<SchedulingModel, ConfigError> {
        let (plant, network) = (self.plant()?, self.network()?);
        SchedulingModel::new(plant, network).map_err(|e| err("model", format!("is invalid: {e}")))
    }

    pub fn grid_options(&self) -> Result<GridOptions, ConfigError> {
        let s = &self.solver;
        let d = self.plant.a.len();
        let seeds = s
            .seeds
            .iter()
            .enumerate()
            .map(|(i, rows)| cov(&format!("solver.seeds[{i}]"), rows, d))
            .collect::<Result<_, _>>()?;
        let base = GridOptions::default();
        if let Some(r) = s.r_max.filter(|r| r.is_nan() || *r <= 0.0) {
            return Err(err("solver.r_max", format!("= {r} must be positive")));
        }
        Ok(GridOptions {
            r_max: s.r_max,
            max_states: s.max_states.unwrap_or(base.max_states),
            resolution: s.resolution.unwrap_or(base.resolution),
            max_depth: s.max_depth,
            seeds,
        })
    }

    pub fn rvi_options(&self) -> RviOptions {
        RviOptions {
            tol: self.solver.tol.unwrap_or(RVI_TOL),
            max_iter: self.solver.max_iter.unwrap_or(RVI_MAX_ITER),
            allow_uncertified: self.solver.allow_uncertified,
        }
    }
}
