//! Fitted constants for the drift and sandwich bounds of value iteration.

use serde::{Deserialize, Serialize};

use super::solve::Bellman;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConstants {
    pub theta1: f64,
    pub theta2: f64,
    /// `(rho_star + theta2) / theta1`.
    pub delta: f64,
    /// Smallest stage after which rolling-horizon policies are guaranteed stable,
    /// `log theta1 / log(1 - theta1)`.
    pub stage_threshold: f64,
}

impl DriftConstants {
    pub fn rho(&self) -> f64 {
        1.0 - self.theta1
    }
}

/// Fits `min_q c_q >= theta1 f - theta2` over the grid, choosing `theta1` in (0, 1)
/// on a fine grid to minimize `delta`. `f` should be a nonnegative relative value function.
pub fn fit_drift_constants(bell: &Bellman, f: &[f64], rho_star: f64) -> DriftConstants {
    let nq = bell.grid().num_queries();
    let min_c: Vec<f64> = (0..f.len())
        .map(|z| (0..nq).map(|q| bell.cost(z, q)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut best: Option<DriftConstants> = None;
    for k in 1..1000 {
        let theta1 = k as f64 / 1000.0;
        let theta2 = f.iter().zip(&min_c).map(|(v, c)| theta1 * v - c).fold(0.0, f64::max);
        let delta = (rho_star + theta2) / theta1;
        if best.as_ref().is_none_or(|b| delta < b.delta) {
            best = Some(DriftConstants {
                theta1,
                theta2,
                delta,
                stage_threshold: theta1.ln() / (1.0 - theta1).ln(),
            });
        }
    }
    best.expect("grid of candidates is nonempty")
}
