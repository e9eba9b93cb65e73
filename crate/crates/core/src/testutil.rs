use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::psd::CovMatrix;

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random PSD matrix, occasionally rank deficient.
pub fn random_psd<R: Rng>(rng: &mut R, d: usize) -> CovMatrix {
    let k = rng.gen_range(1..=d);
    let g = random_matrix(rng, d, k);
    CovMatrix::new(&g * g.transpose()).unwrap()
}

/// Scalar unstable plant with two sensors of different quality over a lossy single-state link.
pub fn bench_model() -> crate::model::SchedulingModel {
    use crate::model::{scalar_plant, NetworkModel, SchedulingModel};
    SchedulingModel::new(scalar_plant(2.0, &[1.0, 0.5]).unwrap(), NetworkModel::single_state(&[0.1, 0.15]).unwrap()).unwrap()
}

/// Same plant over a two-state Markov link with query-dependent costs.
pub fn two_state_model() -> crate::model::SchedulingModel {
    use crate::model::{scalar_plant, NetworkModel, SchedulingModel};
    use nalgebra::dmatrix;
    let net = NetworkModel::new(
        vec![dmatrix![0.8, 0.2; 0.3, 0.7], dmatrix![0.6, 0.4; 0.5, 0.5]],
        vec![vec![0.05, 0.1], vec![0.3, 0.2]],
        vec![vec![0.0, 0.5], vec![0.2, 0.1]],
        None,
    )
    .unwrap();
    SchedulingModel::new(scalar_plant(2.0, &[1.0, 0.5]).unwrap(), net).unwrap()
}
