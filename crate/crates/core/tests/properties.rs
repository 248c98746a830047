//! Property tests for the distance, measure, schedule and surrogate
//! invariants.

use ndarray::Array2;
use proptest::prelude::*;

use popinv::distance::{sliced_w2_value, wasserstein2_1d, SliceSet, WeightingOperator};
use popinv::inference::condition_number;
use popinv::measures::NoiseCov;
use popinv::models::Darcy1DModel;
use popinv::optim::HalvingSchedule;
use popinv::rng;
use popinv::surrogate::{lipschitz_project, MlpShape, MlpSurrogate};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0..5.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w2_1d_is_a_symmetric_permutation_invariant_distance(
        (a, b) in (1usize..20).prop_flat_map(|n| (
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
        )),
        shift in -3.0..3.0f64,
    ) {
        let ab = wasserstein2_1d(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, wasserstein2_1d(&b, &a).unwrap());
        prop_assert_eq!(wasserstein2_1d(&a, &a).unwrap(), 0.0);
        let mut rev = b.clone();
        rev.reverse();
        prop_assert!(close(ab, wasserstein2_1d(&a, &rev).unwrap(), 1e-14));
        let moved: Vec<f64> = a.iter().map(|x| x + shift).collect();
        prop_assert!(close(wasserstein2_1d(&moved, &a).unwrap(), shift * shift, 1e-9));
    }

    #[test]
    fn sliced_w2_divides_by_the_weighting_scale(
        nu in matrix(12, 4),
        mu in matrix(12, 4),
        gamma in 0.05..20.0f64,
        seed in any::<u64>(),
    ) {
        let slices = SliceSet::draw(25, 4, seed).unwrap();
        let plain = sliced_w2_value(&nu, &mu, &WeightingOperator::Identity, &slices).unwrap();
        let scaled = sliced_w2_value(&nu, &mu, &WeightingOperator::ScaledIdentity { gamma }, &slices).unwrap();
        prop_assert!(close(scaled, plain / (gamma * gamma), 1e-12));
    }

    #[test]
    fn sliced_w2_of_a_translate_is_the_mean_squared_projection(
        x in matrix(10, 3),
        v in prop::collection::vec(-2.0..2.0f64, 3),
        seed in any::<u64>(),
    ) {
        let slices = SliceSet::draw(16, 3, seed).unwrap();
        let moved = &x + &ndarray::Array1::from(v.clone());
        let got = sliced_w2_value(&moved, &x, &WeightingOperator::Identity, &slices).unwrap();
        let dirs = slices.directions();
        let want = dirs
            .rows()
            .into_iter()
            .map(|t| t.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().powi(2))
            .sum::<f64>()
            / dirs.nrows() as f64;
        prop_assert!(close(got, want, 1e-9) || (got - want).abs() < 1e-12);
    }

    #[test]
    fn cholesky_noise_is_spd_with_a_valid_weighting(
        entries in prop::collection::vec(-1.0..1.0f64, 10),
        diag in prop::collection::vec(0.1..3.0f64, 4),
    ) {
        let mut l = Array2::zeros((4, 4));
        let mut k = 0;
        for i in 0..4 {
            l[[i, i]] = diag[i];
            for j in 0..i {
                l[[i, j]] = entries[k];
                k += 1;
            }
        }
        let noise = NoiseCov::cholesky_from_factor(&l).unwrap();
        let cov = noise.covariance();
        prop_assert!(cov.iter().zip(cov.t().iter()).all(|(a, b)| a == b));
        prop_assert!(condition_number(&cov) >= 1.0);
        prop_assert!(noise.weighting().and_then(|w| w.validate()).is_ok());
        let x = ndarray::arr1(&[0.3, -1.0, 0.7, 2.0]);
        prop_assert!(x.dot(&cov.dot(&x)) > 0.0);
    }

    #[test]
    fn halving_schedule_only_decreases(lr0 in 1e-4..1.0f64, halvings in 0u32..12, total in 1usize..3000) {
        let s = HalvingSchedule { lr0, halvings, total_steps: total };
        prop_assert_eq!(s.lr(0), lr0);
        let lrs: Vec<f64> = (0..total).map(|t| s.lr(t)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(lrs.iter().all(|&r| r >= lr0 * 0.5f64.powi(halvings as i32)));
    }

    #[test]
    fn darcy_pressure_scales_inversely_with_permeability(z in 0.05..20.0f64, c in 0.1..10.0f64) {
        let model = Darcy1DModel::new(10.0, 50);
        let base = model.solve(z).unwrap();
        let scaled = model.solve(c * z).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!(close(a / c, *b, 1e-12));
        }
    }

    #[test]
    fn projection_restores_the_lipschitz_bound(seed in any::<u64>(), blow_up in 1.0..50.0f64) {
        let shape = MlpShape { input_dim: 2, output_dim: 3, width: 8, depth: 3, lipschitz_bound: 10.0 };
        let mut net = MlpSurrogate::new(shape, &mut rng::stream(seed, 0)).unwrap();
        for w in &mut net.weights {
            w.mapv_inplace(|v| v * blow_up);
        }
        lipschitz_project(&mut net);
        prop_assert!(net.max_layer_norm() <= 10.0);
    }
}
