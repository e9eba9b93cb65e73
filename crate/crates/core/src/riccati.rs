//! Control-side Riccati recursions, feedback gains and the scheduling cost weight.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PlantModel;
use crate::psd::{spd_solve, symmetrize, CovMatrix};

pub const ARE_TOL: f64 = 1e-10;
pub const ARE_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    /// Fixed point of the Riccati map.
    #[serde(rename = "Pi")]
    pub pi: CovMatrix,
    /// Weight of the estimation error in the scheduling cost, `R - Pi + alpha A' Pi A`.
    #[serde(rename = "Pi_tilde")]
    pub pi_tilde: CovMatrix,
    /// Feedback gain, applied as `u = -K x_hat`.
    #[serde(rename = "K", with = "crate::serde_rows")]
    pub k: DMatrix<f64>,
    pub alpha: f64,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSequence {
    /// `pis[t]` for t = 0..=n, with `pis[n]` the terminal weight.
    pub pis: Vec<CovMatrix>,
    /// `gains[t]` for t = 0..n.
    pub gains: Vec<DMatrix<f64>>,
    /// Scheduling weights `R - pis[t] + alpha A' pis[t+1] A` for t = 0..n.
    pub pi_tildes: Vec<CovMatrix>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidModel(format!("discount {alpha} is outside (0, 1]")));
    }
    Ok(())
}

/// Gain `(M + alpha B' P B)^{-1} alpha B' P A` for the next-step weight `P`.
pub fn gain(plant: &PlantModel, alpha: f64, next: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b) = (plant.a(), plant.b());
    if b.ncols() == 0 {
        return Ok(DMatrix::zeros(0, plant.dim()));
    }
    let bt_p = b.transpose() * next;
    let g = plant.m().matrix() + &bt_p * b * alpha;
    spd_solve(&g, &(&bt_p * a * alpha))
}

/// One application of the Riccati map, returning the new weight and the gain.
fn step(plant: &PlantModel, alpha: f64, next: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let a = plant.a();
    let k = gain(plant, alpha, next)?;
    let bt_p_a = plant.b().transpose() * next * a * alpha;
    // alpha^2 A'PB G^{-1} B'PA = (alpha B'PA)' K
    let out = plant.r().matrix() + a.transpose() * next * a * alpha - bt_p_a.transpose() * &k;
    Ok((symmetrize(&out), k))
}

/// `Pi -> R + alpha A'Pi A - alpha^2 A'Pi B (M + alpha B'Pi B)^{-1} B'Pi A`.
pub fn riccati_map(plant: &PlantModel, alpha: f64, pi: &CovMatrix) -> Result<CovMatrix> {
    check_alpha(alpha)?;
    let (m, _) = step(plant, alpha, pi.matrix())?;
    CovMatrix::new(m)
}

/// Stage weight `R - pi_t + alpha A' pi_next A` of the estimation error.
pub fn stage_weight(plant: &PlantModel, alpha: f64, pi_t: &DMatrix<f64>, pi_next: &DMatrix<f64>) -> Result<CovMatrix> {
    let a = plant.a();
    CovMatrix::new(plant.r().matrix() - pi_t + a.transpose() * pi_next * a * alpha)
}

/// Backward recursion over `n` steps from the terminal weight `pi_fin`.
pub fn finite_horizon_lqr(plant: &PlantModel, alpha: f64, n: usize, pi_fin: &CovMatrix) -> Result<LqrSequence> {
    check_alpha(alpha)?;
    if n == 0 {
        return Err(Error::InvalidModel("horizon must be at least 1".into()));
    }
    if pi_fin.dim() != plant.dim() {
        return Err(Error::Dimension(format!("terminal weight is {}x{0}, plant is {1}x{1}", pi_fin.dim(), plant.dim())));
    }
    let mut pis = vec![pi_fin.clone(); n + 1];
    let mut gains = vec![DMatrix::zeros(plant.input_dim(), plant.dim()); n];
    for t in (0..n).rev() {
        let (p, k) = step(plant, alpha, pis[t + 1].matrix())?;
        pis[t] = CovMatrix::new(p)?;
        gains[t] = k;
    }
    let pi_tildes = (0..n)
        .map(|t| stage_weight(plant, alpha, pis[t].matrix(), pis[t + 1].matrix()))
        .collect::<Result<_>>()?;
    Ok(LqrSequence { pis, gains, pi_tildes })
}

#[derive(Debug, Clone)]
pub struct AreOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial iterate; `None` starts from R.
    pub init: Option<CovMatrix>,
}

impl Default for AreOptions {
    fn default() -> Self {
        Self { tol: ARE_TOL, max_iter: ARE_MAX_ITER, init: None }
    }
}

/// Solves the discounted algebraic Riccati equation by fixed-point iteration from R.
pub fn solve_are(plant: &PlantModel, alpha: f64) -> Result<RiccatiSolution> {
    solve_are_with(plant, alpha, &AreOptions::default())
}

pub fn solve_are_with(plant: &PlantModel, alpha: f64, opts: &AreOptions) -> Result<RiccatiSolution> {
    check_alpha(alpha)?;
    let mut pi = opts.init.as_ref().map_or_else(|| plant.r().matrix().clone(), |p| p.matrix().clone());
    let mut residual = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let (next, k) = step(plant, alpha, &pi)?;
        residual = (&next - &pi).norm();
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol * (1.0 + pi.norm()) {
            let pi_tilde = stage_weight(plant, alpha, &pi, &pi)?;
            return Ok(RiccatiSolution {
                pi: CovMatrix::new(pi)?,
                pi_tilde,
                k,
                alpha,
                iterations: it,
                residual,
            });
        }
        pi = next;
    }
    Err(Error::Convergence { iterations: opts.max_iter, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scalar_plant, Sensor};
    use crate::psd::{psd_order, PsdOrdering};
    use nalgebra::dmatrix;

    fn stable_plant(b: f64) -> PlantModel {
        PlantModel::new(
            dmatrix![0.5],
            dmatrix![b],
            dmatrix![1.0, 0.0],
            CovMatrix::identity(1),
            CovMatrix::identity(1),
            vec![vec![Sensor::new(dmatrix![1.0], dmatrix![0.0, 1.0])]],
        )
        .unwrap()
    }

    #[test]
    fn scalar_closed_form() {
        let p = scalar_plant(2.0, &[1.0]).unwrap();
        let sol = solve_are(&p, 1.0).unwrap();
        // Positive root of x^2 - 4x - 1 = 0.
        let root = (4.0 + (16.0f64 + 4.0).sqrt()) / 2.0;
        assert!((sol.pi.get(0, 0) - root).abs() < 1e-9);
        assert!((sol.k[(0, 0)] - 2.0 * root / (1.0 + root)).abs() < 1e-9);
        assert!((sol.pi_tilde.get(0, 0) - (1.0 + 3.0 * root)).abs() < 1e-8);
        assert!(sol.residual <= ARE_TOL * (1.0 + root));
    }

    #[test]
    fn stable_geometric_series() {
        let sol = solve_are(&stable_plant(0.0), 1.0).unwrap();
        assert!((sol.pi.get(0, 0) - 1.0 / (1.0 - 0.25)).abs() < 1e-9);
        assert_eq!(sol.k[(0, 0)], 0.0);
        // Without actuation the estimation error carries no extra cost.
        assert!(sol.pi_tilde.get(0, 0).abs() < 1e-9);
        let sol = solve_are(&stable_plant(0.0), 0.5).unwrap();
        assert!((sol.pi.get(0, 0) - 1.0 / (1.0 - 0.125)).abs() < 1e-9);
    }

    #[test]
    fn one_step_with_zero_terminal() {
        let p = scalar_plant(2.0, &[1.0]).unwrap();
        let seq = finite_horizon_lqr(&p, 1.0, 1, &CovMatrix::zeros(1)).unwrap();
        assert_eq!(seq.pis[0], *p.r());
        assert_eq!(seq.gains[0][(0, 0)], 0.0);
    }

    #[test]
    fn two_steps_by_hand() {
        let p = scalar_plant(2.0, &[1.0]).unwrap();
        let seq = finite_horizon_lqr(&p, 1.0, 2, &CovMatrix::zeros(1)).unwrap();
        // Scalar map P -> r + a^2 P m / (m + b^2 P).
        let scalar = |x: f64| 1.0 + 4.0 * x / (1.0 + x);
        let p1 = scalar(0.0);
        let p0 = scalar(p1);
        assert!((seq.pis[1].get(0, 0) - p1).abs() < 1e-14);
        assert!((seq.pis[0].get(0, 0) - p0).abs() < 1e-14);
        assert!((seq.gains[0][(0, 0)] - 2.0 * p1 / (1.0 + p1)).abs() < 1e-14);
        assert!((seq.pi_tildes[0].get(0, 0) - (1.0 - p0 + 4.0 * p1)).abs() < 1e-13);
    }

    #[test]
    fn stationary_terminal_is_time_invariant() {
        let p = scalar_plant(2.0, &[1.0]).unwrap();
        let sol = solve_are(&p, 1.0).unwrap();
        let seq = finite_horizon_lqr(&p, 1.0, 25, &sol.pi).unwrap();
        for t in 0..25 {
            assert!((seq.pis[t].get(0, 0) - (2.0 + 5f64.sqrt())).abs() < 1e-9);
            assert!(seq.pi_tildes[t].frobenius_dist(&sol.pi_tilde) < 1e-8);
        }
    }

    fn plant_2d() -> PlantModel {
        PlantModel::new(
            dmatrix![1.1, 0.4; -0.2, 0.9],
            dmatrix![1.0, 0.0; 0.3, 1.0],
            dmatrix![1.0, 0.0, 0.0; 0.0, 0.5, 0.0],
            CovMatrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap(),
            CovMatrix::from_diagonal(&[1e-3, 1e-3]).unwrap(),
            vec![vec![Sensor::new(dmatrix![1.0, 0.0], dmatrix![0.0, 0.0, 1.0])]],
        )
        .unwrap()
    }

    #[test]
    fn matches_long_backward_recursion() {
        let p = plant_2d();
        for alpha in [0.7, 0.95, 1.0] {
            let sol = solve_are(&p, alpha).unwrap();
            let seq = finite_horizon_lqr(&p, alpha, 10_000, &CovMatrix::zeros(2)).unwrap();
            assert!(seq.pis[0].frobenius_dist(&sol.pi) < 1e-8 * (1.0 + sol.pi.matrix().norm()));
            assert!((&seq.gains[0] - &sol.k).norm() < 1e-7);
        }
    }

    #[test]
    fn monotone_from_zero() {
        let p = plant_2d();
        let sol = solve_are(&p, 1.0).unwrap();
        let mut pi = CovMatrix::zeros(2);
        for _ in 0..200 {
            let next = riccati_map(&p, 1.0, &pi).unwrap();
            let o = psd_order(&pi, &next, 1e-9 * (1.0 + next.trace())).unwrap();
            assert!(matches!(o, PsdOrdering::LessEq | PsdOrdering::Equal));
            pi = next;
        }
        let from_zero = solve_are_with(&p, 1.0, &AreOptions { init: Some(CovMatrix::zeros(2)), ..Default::default() }).unwrap();
        assert!(from_zero.pi.frobenius_dist(&sol.pi) < 1e-8);
        assert!(pi.frobenius_dist(&sol.pi) < 1e-8);
    }

    #[test]
    fn discounted_weight_approaches_average() {
        let p = plant_2d();
        let star = solve_are(&p, 1.0).unwrap().pi_tilde;
        let d: Vec<f64> = [0.9, 0.99, 0.999]
            .iter()
            .map(|&a| solve_are(&p, a).unwrap().pi_tilde.frobenius_dist(&star))
            .collect();
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    }

    #[test]
    fn rejects_bad_discount_and_divergence() {
        let p = scalar_plant(2.0, &[1.0]).unwrap();
        assert!(solve_are(&p, 0.0).is_err());
        assert!(solve_are(&p, 1.5).is_err());
        let opts = AreOptions { max_iter: 3, ..Default::default() };
        assert!(matches!(solve_are_with(&p, 1.0, &opts), Err(Error::Convergence { .. })));
    }

    #[test]
    fn solution_json_roundtrip() {
        let sol = solve_are(&plant_2d(), 0.9).unwrap();
        let s = serde_json::to_string(&sol).unwrap();
        let back: RiccatiSolution = serde_json::from_str(&s).unwrap();
        assert_eq!(back, sol);
    }
}
