mod common;

use netsched::kernel::{apply_kernel, branches};
use netsched::model::{scalar_plant, NetworkModel, SchedulingModel};
use netsched::CovMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn filter_maps_are_monotone(seed in any::<u64>()) {
        common::check_monotone(&mut ChaCha8Rng::seed_from_u64(seed)).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn update_is_concave_and_contracts(seed in any::<u64>()) {
        common::check_concave(&mut ChaCha8Rng::seed_from_u64(seed)).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn eigenvalue_floor_bounds_words(seed in any::<u64>()) {
        common::check_floor(&mut ChaCha8Rng::seed_from_u64(seed)).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn more_loss_never_helps(seed in any::<u64>()) {
        common::check_loss_comparison(&mut ChaCha8Rng::seed_from_u64(seed)).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn branch_probabilities_sum_to_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = common::model(&mut rng);
        let c = common::psd(&mut rng, m.plant.dim());
        for s in 0..m.num_states() {
            for q in 0..m.num_queries() {
                let total: f64 = branches(&m, s, &c, q).unwrap().iter().map(|b| b.probability).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                let one = apply_kernel(&m, |_, _| Ok(1.0), s, &c, q).unwrap();
                prop_assert!((one - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn kernel_matches_sampled_branches() {
    let net = NetworkModel::new(
        vec![nalgebra::dmatrix![0.7, 0.3; 0.4, 0.6]],
        vec![vec![0.2], vec![0.45]],
        vec![vec![0.0], vec![0.0]],
        None,
    )
    .unwrap();
    let m = SchedulingModel::new(scalar_plant(2.0, &[1.0]).unwrap(), net).unwrap();
    let sigma = CovMatrix::from_diagonal(&[0.7]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for s in 0..2 {
        let exact = apply_kernel(&m, |_, c| Ok(c.trace()), s, &sigma, 0).unwrap();
        let br = branches(&m, s, &sigma, 0).unwrap();
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let mut u: f64 = rng.gen();
            let b = br.iter().find(|b| {
                u -= b.probability;
                u < 0.0
            });
            let v = b.unwrap_or(br.last().unwrap()).next_cov.trace();
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "state {s}: {mean} vs {exact} (se {se})");
    }
}
