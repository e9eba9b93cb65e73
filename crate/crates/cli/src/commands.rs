//! Subcommand implementations. Each returns the JSON or CSV text it would print.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use netsched::mdp::{
    default_r_max, discounted_vi, finite_horizon_dp, rvi, Heuristic, SchedulingPolicy, StateGrid, TablePolicy,
};
use netsched::model::{check_minorization, SchedulingModel};
use netsched::riccati::solve_are;
use netsched::sim::{estimate_cost, run_episode, EpisodeOptions, SimStep};
use netsched::stability::{
    default_rays, diagonal_region, map_region, MapOptions, PolicySource, ProbeOptions, ProbeOracle, RegionMap,
    RegionSample, VerdictOracle,
};
use netsched::CovMatrix;
use serde::Serialize;

use crate::artifact::{FiniteArtifact, GridSummary, SimSummary, SolveArtifact, SolveMode, ValidationReport};
use crate::config::ModelConfig;

const DEFAULT_DISCOUNT: f64 = 0.95;
const DEFAULT_SIM_HORIZON: usize = 5000;
const DEFAULT_SIM_REPLICATIONS: usize = 200;

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<Option<String>> {
    match path {
        Some(p) => {
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            Ok(None)
        }
        None => Ok(Some(text.to_string())),
    }
}

fn seed_or_default(flag: Option<u64>, cfg: &ModelConfig) -> u64 {
    flag.or(cfg.sim.base_seed).unwrap_or_else(|| {
        eprintln!("no seed given; using seed 0");
        0
    })
}

#[derive(Debug, Args)]
pub struct RiccatiArgs {
    pub config: PathBuf,
    /// Discount factor; defaults to solver.alpha, then 1.
    #[arg(long)]
    pub alpha: Option<f64>,
}

pub fn riccati(a: &RiccatiArgs) -> Result<String> {
    let cfg = ModelConfig::load(&a.config)?;
    let plant = cfg.plant()?;
    let alpha = a.alpha.or(cfg.solver.alpha).unwrap_or(1.0);
    to_json(&solve_are(&plant, alpha)?)
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "average")]
    pub mode: SolveMode,
    /// Number of stages for finite mode.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Earlier solve output whose values start the iteration.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Artifact destination; printed when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_artifact(path: &Path) -> Result<SolveArtifact> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a solve artifact", path.display()))
}

pub fn solve(a: &SolveArgs) -> Result<String> {
    let cfg = ModelConfig::load(&a.config)?;
    let model = cfg.model()?;
    let grid = StateGrid::build(&model, &cfg.grid_options()?)?;
    let init = a.init.as_deref().map(load_artifact).transpose()?.map(|art| art.table.values);
    if init.as_ref().is_some_and(|v| v.len() != grid.len()) {
        bail!(crate::config::ConfigError {
            path: "--init".into(),
            message: format!("has {} values, the grid has {} states", init.unwrap().len(), grid.len())
        });
    }
    let (alpha, horizon, table) = match a.mode {
        SolveMode::Average => (1.0, None, rvi(&grid, &model, &cfg.rvi_options(), init.as_deref())?),
        SolveMode::Discounted => {
            let alpha = a.alpha.or(cfg.solver.alpha).unwrap_or(DEFAULT_DISCOUNT);
            let opts = cfg.rvi_options();
            (alpha, None, discounted_vi(&grid, &model, alpha, opts.tol, opts.max_iter, init.as_deref())?)
        }
        SolveMode::Finite => {
            let n = a.horizon.context("finite mode needs --horizon")?;
            let alpha = a.alpha.or(cfg.solver.alpha).unwrap_or(1.0);
            let mut stages = finite_horizon_dp(&grid, &model, alpha, n, &CovMatrix::zeros(model.plant.dim()))?;
            (alpha, Some(n), stages.swap_remove(0))
        }
    };
    let policy = SchedulingPolicy::Table(TablePolicy::from_grid(&grid, &table.minimizer, horizon)?);
    let art = SolveArtifact { mode: a.mode, alpha, horizon, grid: GridSummary::of(&grid), table, policy };
    let text = to_json(&art)?;
    Ok(match write_out(a.out.as_deref(), &text)? {
        Some(t) => t,
        None => to_json(&serde_json::json!({
            "mode": art.mode,
            "states": art.grid.states,
            "iterations": art.table.iterations,
            "rho_star": art.table.rho_star,
        }))?,
    })
}

#[derive(Debug, Args)]
pub struct FiniteArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub horizon: usize,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn finite(a: &FiniteArgs) -> Result<String> {
    let cfg = ModelConfig::load(&a.config)?;
    let model = cfg.model()?;
    let grid = StateGrid::build(&model, &cfg.grid_options()?)?;
    let alpha = a.alpha.or(cfg.solver.alpha).unwrap_or(1.0);
    let stages = finite_horizon_dp(&grid, &model, alpha, a.horizon, &CovMatrix::zeros(model.plant.dim()))?;
    let art = FiniteArtifact { horizon: a.horizon, alpha, grid: GridSummary::of(&grid), stages };
    let text = to_json(&art)?;
    Ok(write_out(a.out.as_deref(), &text)?.unwrap_or_else(|| format!("{{\"horizon\": {}, \"states\": {}}}", art.horizon, art.grid.states)))
}

/// Resolves a policy argument: `round-robin`, `greedy`, `fixed:<q>`, `optimal`, or a path to a
/// solve artifact or a bare policy file.
fn policy_from_arg(arg: &str, cfg: &ModelConfig, model: &SchedulingModel) -> Result<SchedulingPolicy> {
    match arg {
        "round-robin" => return Ok(SchedulingPolicy::Heuristic(Heuristic::RoundRobin)),
        "greedy" => return Ok(SchedulingPolicy::Heuristic(Heuristic::Greedy)),
        "optimal" => {
            let grid = StateGrid::build(model, &cfg.grid_options()?)?;
            let v = rvi(&grid, model, &cfg.rvi_options(), None)?;
            return Ok(SchedulingPolicy::Table(TablePolicy::from_grid(&grid, &v.minimizer, None)?));
        }
        _ => {}
    }
    if let Some(q) = arg.strip_prefix("fixed:") {
        let q: usize = q.parse().with_context(|| format!("bad query index in {arg:?}"))?;
        if q >= model.num_queries() {
            bail!(crate::config::ConfigError { path: "--policy".into(), message: format!("query {q} does not exist") });
        }
        return Ok(SchedulingPolicy::Heuristic(Heuristic::Fixed(q)));
    }
    let text = std::fs::read_to_string(arg).with_context(|| format!("--policy {arg:?} is neither a builtin nor a readable file"))?;
    if let Ok(art) = serde_json::from_str::<SolveArtifact>(&text) {
        return Ok(art.policy);
    }
    serde_json::from_str(&text).with_context(|| format!("{arg} holds neither a solve artifact nor a policy"))
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub config: PathBuf,
    /// round-robin, greedy, fixed:<q>, optimal, or a policy file.
    #[arg(long, default_value = "optimal")]
    pub policy: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-step trace of the first replication as JSON lines.
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
    /// Per-step trace of the first replication as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct StepRow {
    t: usize,
    s: usize,
    q: usize,
    received: bool,
    pi_trace: f64,
    pi_min_eig: f64,
    net_cost: f64,
    stage_cost: f64,
    x: String,
    x_hat: String,
    u: String,
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

impl From<&SimStep> for StepRow {
    fn from(s: &SimStep) -> Self {
        Self {
            t: s.t,
            s: s.s,
            q: s.q,
            received: s.received,
            pi_trace: s.pi_trace,
            pi_min_eig: s.pi_min_eig,
            net_cost: s.net_cost,
            stage_cost: s.stage_cost,
            x: join(&s.x),
            x_hat: join(&s.x_hat),
            u: join(&s.u),
        }
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<String> {
    let cfg = ModelConfig::load(&a.config)?;
    let model = cfg.model()?;
    let policy = policy_from_arg(&a.policy, &cfg, &model)?;
    let seed = seed_or_default(a.seed, &cfg);
    let horizon = cfg.sim.horizon.unwrap_or(DEFAULT_SIM_HORIZON);
    let reps = cfg.sim.replications.unwrap_or(DEFAULT_SIM_REPLICATIONS);
    let k = solve_are(&model.plant, 1.0)?.k;
    let estimate = estimate_cost(&model, &policy, &k, horizon, reps, seed)?;
    if a.jsonl.is_some() || a.csv.is_some() {
        let trace = run_episode(&model, &policy, &k, &EpisodeOptions::new(horizon, seed))?;
        if let Some(p) = &a.jsonl {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            for s in &trace.steps {
                serde_json::to_writer(&mut w, s)?;
                writeln!(w)?;
            }
            w.flush()?;
        }
        if let Some(p) = &a.csv {
            let mut w = csv::Writer::from_path(p).with_context(|| format!("creating {}", p.display()))?;
            for s in &trace.steps {
                w.serialize(StepRow::from(s))?;
            }
            w.flush()?;
        }
    }
    to_json(&SimSummary { policy: a.policy.clone(), horizon, seed, estimate })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    /// Monte Carlo probe on the configured model with the loss table replaced.
    Probe,
    /// Closed-form region of a diagonal plant with one sensor per mode.
    Analytic,
}

#[derive(Debug, Args)]
pub struct RegionArgs {
    pub config: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub rays: usize,
    #[arg(long, default_value_t = 0.01)]
    pub tol: f64,
    #[arg(long, value_enum, default_value = "probe")]
    pub oracle: OracleKind,
    /// round-robin, greedy, fixed:<q>, or optimal (re-solved at every loss-rate vector).
    #[arg(long, default_value = "optimal")]
    pub policy: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination; printed when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RegionRow {
    ray: usize,
    direction: String,
    lambda: String,
    verdict: String,
    evidence: String,
    stable_scale: f64,
    unstable_scale: Option<f64>,
}

fn region_csv(map: &RegionMap) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, ray) in map.rays.iter().enumerate() {
        for smp in &ray.samples {
            w.serialize(RegionRow {
                ray: i,
                direction: join(&ray.direction),
                lambda: join(&smp.lambda),
                verdict: format!("{:?}", smp.verdict),
                evidence: format!("{:?}", smp.evidence),
                stable_scale: ray.stable_scale,
                unstable_scale: ray.unstable_scale,
            })?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn region(a: &RegionArgs) -> Result<String> {
    let cfg = ModelConfig::load(&a.config)?;
    let model = cfg.model()?;
    let nq = model.num_queries();
    let opts = MapOptions { tol: a.tol, ..Default::default() };
    let rays = default_rays(nq, a.rays);
    let map = match a.oracle {
        OracleKind::Analytic => {
            let am = model.plant.a();
            let diag = (0..am.nrows()).all(|i| (0..am.ncols()).all(|j| i == j || am[(i, j)] == 0.0));
            if !diag || am.nrows() != nq {
                bail!(crate::config::ConfigError {
                    path: "plant.A".into(),
                    message: "must be diagonal with one query per mode for the analytic oracle".into()
                });
            }
            let region = diagonal_region(am.diagonal().as_slice())?;
            let oracle = |l: &[f64]| -> netsched::Result<RegionSample> { Ok(region.sample(l)) };
            map_region(&oracle as &dyn VerdictOracle, &rays, &opts)?
        }
        OracleKind::Probe => {
            let policy = if a.policy == "optimal" {
                PolicySource::Resolve { grid: cfg.grid_options()?, rvi: netsched::mdp::RviOptions { allow_uncertified: true, ..cfg.rvi_options() } }
            } else {
                PolicySource::Fixed(policy_from_arg(&a.policy, &cfg, &model)?)
            };
            let defaults = ProbeOptions::default();
            let options = ProbeOptions {
                horizon: cfg.sim.horizon.unwrap_or(defaults.horizon),
                replications: cfg.sim.replications.unwrap_or(defaults.replications),
                seed: seed_or_default(a.seed, &cfg),
                policy,
                ..defaults
            };
            let n = model.num_states();
            let base = &model;
            let family = move |l: &[f64]| -> netsched::Result<SchedulingModel> {
                SchedulingModel::new(base.plant.clone(), base.network.with_loss(vec![l.to_vec(); n])?)
            };
            map_region(&ProbeOracle { family, options }, &rays, &opts)?
        }
    };
    let text = region_csv(&map)?;
    Ok(write_out(a.out.as_deref(), &text)?.unwrap_or_default())
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub config: PathBuf,
}

pub fn validate(a: &ValidateArgs) -> Result<String> {
    let cfg = ModelConfig::load(&a.config)?;
    let model = cfg.model()?;
    let p = &model.plant;
    let (minorization, failure) = match check_minorization(&model.network) {
        Ok(m) => (Some(m.theta), None),
        Err(f) => (None, Some(f.to_string())),
    };
    to_json(&ValidationReport {
        state_dim: p.dim(),
        input_dim: p.input_dim(),
        noise_dim: p.noise_dim(),
        queries: model.num_queries(),
        network_states: model.num_states(),
        assumptions: p.assumptions()?,
        minorization,
        minorization_failure: failure,
        default_r_max: default_r_max(&model).ok(),
    })
}
