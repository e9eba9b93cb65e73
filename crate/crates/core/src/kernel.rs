//! Covariance maps and the controlled transition kernel of the
//! (network state, error covariance) chain.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PlantModel, SchedulingModel, Sensor};
use crate::psd::{min_eig, spd_solve, symmetrize, CovMatrix};

/// Branches below this probability are dropped.
pub const PRUNE_PROB: f64 = 1e-15;
/// Allowed disagreement between the Joseph and subtractive updates, relative to the prediction.
pub const FORM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelBranch {
    pub next_net_state: usize,
    pub probability: f64,
    pub next_cov: CovMatrix,
    pub received: bool,
}

/// Prediction step `D D' + A sigma A'`.
pub fn xi(plant: &PlantModel, sigma: &CovMatrix) -> CovMatrix {
    let a = plant.a();
    CovMatrix::from_sym_unchecked(plant.dd_t().matrix() + a * sigma.matrix() * a.transpose())
}

/// Kalman gain for a predicted covariance `pred`.
fn kalman_gain(sensor: &Sensor, pred: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (c, f) = (&sensor.c, &sensor.f);
    let pct = pred * c.transpose();
    let innov = c * &pct + f * f.transpose();
    // K = P C' S^{-1}  <=>  S K' = C P
    Ok(spd_solve(&innov, &pct.transpose())?.transpose())
}

/// Measurement update of a predicted covariance, in Joseph form, checked against the subtractive form.
pub fn update(sensor: &Sensor, pred: &CovMatrix) -> Result<CovMatrix> {
    let p = pred.matrix();
    let k = kalman_gain(sensor, p)?;
    let kc = &k * &sensor.c;
    let subtractive = p - &kc * p;
    let d = p.nrows();
    let l = DMatrix::identity(d, d) - kc;
    let kf = &k * &sensor.f;
    let joseph = symmetrize(&(&l * p * l.transpose() + &kf * kf.transpose()));
    let gap = (&joseph - &subtractive).norm();
    if !(gap <= FORM_TOL * (1.0 + p.norm())) {
        return Err(Error::Numerical(format!(
            "Joseph and subtractive updates disagree by {gap:e}"
        )));
    }
    Ok(CovMatrix::from_sym_unchecked(joseph))
}

/// Covariance after a successful measurement of query `q` issued in network state `s`.
pub fn t_q(plant: &PlantModel, q: usize, s: usize, sigma: &CovMatrix) -> Result<CovMatrix> {
    update(plant.sensor(q, s), &xi(plant, sigma))
}

/// All outcomes of querying `q` from `(s, sigma)`: for each successor network state,
/// a received branch and a lost branch. Zero-probability branches are omitted.
pub fn branches(model: &SchedulingModel, s: usize, sigma: &CovMatrix, q: usize) -> Result<Vec<KernelBranch>> {
    let net = &model.network;
    let lost = xi(&model.plant, sigma);
    let lam = net.loss(s, q);
    let received = if lam < 1.0 { Some(update(model.plant.sensor(q, s), &lost)?) } else { None };
    let mut out = Vec::with_capacity(2 * net.num_states());
    for s_next in 0..net.num_states() {
        let p = net.prob(q, s, s_next);
        let pr = p * (1.0 - lam);
        if pr >= PRUNE_PROB {
            out.push(KernelBranch {
                next_net_state: s_next,
                probability: pr,
                next_cov: received.clone().expect("received branch has positive probability"),
                received: true,
            });
        }
        let pl = p * lam;
        if pl >= PRUNE_PROB {
            out.push(KernelBranch { next_net_state: s_next, probability: pl, next_cov: lost.clone(), received: false });
        }
    }
    Ok(out)
}

/// Expected value of `f` one step ahead under query `q`.
pub fn apply_kernel<F>(model: &SchedulingModel, mut f: F, s: usize, sigma: &CovMatrix, q: usize) -> Result<f64>
where
    F: FnMut(usize, &CovMatrix) -> Result<f64>,
{
    let mut acc = 0.0;
    for b in branches(model, s, sigma, q)? {
        acc += b.probability * f(b.next_net_state, &b.next_cov)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    #[serde(with = "dvec_serde")]
    pub x_hat: DVector<f64>,
    pub pi_hat: CovMatrix,
    pub s: usize,
}

mod dvec_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// The measurement when it arrived, `None` when it was lost.
    pub y: Option<DVector<f64>>,
    pub next_s: usize,
}

/// One filter step: predict with control `u`, then correct if the measurement arrived.
pub fn step_filter(
    plant: &PlantModel,
    state: &FilterState,
    q: usize,
    u: &DVector<f64>,
    outcome: &Outcome,
) -> Result<FilterState> {
    if u.len() != plant.input_dim() {
        return Err(Error::Dimension(format!("control has {} entries, expected {}", u.len(), plant.input_dim())));
    }
    let x_pred = plant.a() * &state.x_hat + plant.b() * u;
    let pred = xi(plant, &state.pi_hat);
    let (x_hat, pi_hat) = match &outcome.y {
        None => (x_pred, pred),
        Some(y) => {
            let sensor = plant.sensor(q, state.s);
            if y.len() != sensor.c.nrows() {
                return Err(Error::Dimension(format!(
                    "measurement has {} entries, sensor {q} produces {}",
                    y.len(),
                    sensor.c.nrows()
                )));
            }
            let k = kalman_gain(sensor, pred.matrix())?;
            let innov = y - &sensor.c * &x_pred;
            (&x_pred + k * innov, update(sensor, &pred)?)
        }
    };
    Ok(FilterState { x_hat, pi_hat, s: outcome.next_s })
}

/// One letter of a covariance word: a lost step, or a received step for a given sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Letter {
    Lost,
    Received { q: usize, s: usize },
}

pub fn apply_letter(plant: &PlantModel, l: Letter, sigma: &CovMatrix) -> Result<CovMatrix> {
    match l {
        Letter::Lost => Ok(xi(plant, sigma)),
        Letter::Received { q, s } => t_q(plant, q, s, sigma),
    }
}

/// Minimum over all words of length `len` of the smallest eigenvalue of the word applied to 0.
///
/// With (A, D) controllable and `len >= dim`, the result is strictly positive, and by
/// monotonicity it bounds from below the smallest eigenvalue of every such word applied
/// to any covariance.
pub fn eigenvalue_floor(plant: &PlantModel, num_states: usize, len: usize) -> Result<f64> {
    let mut alphabet = vec![Letter::Lost];
    for q in 0..plant.num_queries() {
        let n = if plant.sensors()[q].len() == 1 { 1 } else { num_states };
        alphabet.extend((0..n).map(|s| Letter::Received { q, s }));
    }
    let mut layer = vec![CovMatrix::zeros(plant.dim())];
    for _ in 0..len {
        let mut next = Vec::with_capacity(layer.len() * alphabet.len());
        for sig in &layer {
            for &l in &alphabet {
                next.push(apply_letter(plant, l, sig)?);
            }
        }
        layer = next;
    }
    layer.iter().map(min_eig).try_fold(f64::INFINITY, |m, v| Ok(m.min(v?)))
}
