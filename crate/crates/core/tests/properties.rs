//! Property tests over seeded random plants and random matrices.

use ddesc_core::campaign::{generate_plant, plant_shift, PlantSpec};
use ddesc_core::experiments::{collect_data_matrices, run_experiment1};
use ddesc_core::kernels::{
    core_nilpotent, finite_generalized_eigenvalues, multiset_distance, rank_with_tolerance,
    CoreNilpotentOptions,
};
use ddesc_core::model::{certify_shift, simulate, slow_fast_decompose};
use ddesc_core::{
    DescriptorSystem, ExperimentConfig, Matrix, RankTolerance, SimulatedPlant, Vector,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(x: &Matrix, y: &Matrix) -> f64 {
    (x - y).norm() / y.norm().max(1e-300)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn finite_eigs(sys: &DescriptorSystem, s0: f64) -> Vec<ddesc_core::C64> {
    let inv = certify_shift(sys, s0).unwrap();
    finite_generalized_eigenvalues(&(&inv * &sys.e), s0, CoreNilpotentOptions::default())
        .unwrap()
        .finite
}

fn config_for(sys: &DescriptorSystem, s0: f64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        s0,
        horizon: 2 * ExperimentConfig::min_horizon(sys.n(), sys.m()),
        seed,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn finite_spectrum_does_not_depend_on_shift(seed in 0u64..10_000, offset in 0.3f64..3.0) {
        let gp = generate_plant(&PlantSpec::default(), seed);
        let s0 = plant_shift(&gp.sys).unwrap();
        let s1 = s0 + offset;
        prop_assume!(certify_shift(&gp.sys, s1).is_ok());
        let a = finite_eigs(&gp.sys, s0);
        let b = finite_eigs(&gp.sys, s1);
        prop_assert_eq!(a.len(), gp.n1);
        prop_assert!(multiset_distance(&a, &b).unwrap() < 1e-6);
    }

    #[test]
    fn finite_spectrum_is_similarity_invariant(seed in 0u64..10_000) {
        let gp = generate_plant(&PlantSpec::default(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = gp.sys.n();
        let (q, p) = loop {
            let q = random_matrix(&mut rng, n, n) + Matrix::identity(n, n) * 2.0;
            let p = random_matrix(&mut rng, n, n) + Matrix::identity(n, n) * 2.0;
            if q.determinant().abs() > 0.1 && p.determinant().abs() > 0.1 {
                break (q, p);
            }
        };
        let moved = DescriptorSystem::new(&q * &gp.sys.e * &p, &q * &gp.sys.a * &p, &q * &gp.sys.b).unwrap();
        let s0 = plant_shift(&gp.sys).unwrap();
        prop_assume!(certify_shift(&moved, s0).is_ok());
        let d = multiset_distance(&finite_eigs(&gp.sys, s0), &finite_eigs(&moved, s0)).unwrap();
        prop_assert!(d < 1e-6, "distance {}", d);
    }

    #[test]
    fn core_nilpotent_round_trip(seed in 0u64..10_000, n1 in 0usize..4, n2 in 0usize..4) {
        prop_assume!(n1 + n2 > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n1 + n2;
        // Core block with eigenvalues bounded away from zero.
        let core = random_matrix(&mut rng, n1, n1) * 0.3 + Matrix::identity(n1, n1);
        let mut nil = Matrix::zeros(n2, n2);
        for i in 0..n2.saturating_sub(1) {
            nil[(i, i + 1)] = if rng.gen_bool(0.7) { 1.0 } else { 0.0 };
        }
        let mut blocks = Matrix::zeros(n, n);
        blocks.view_mut((0, 0), (n1, n1)).copy_from(&core);
        blocks.view_mut((n1, n1), (n2, n2)).copy_from(&nil);
        let t = random_matrix(&mut rng, n, n) + Matrix::identity(n, n) * 3.0;
        let d = &t * blocks * t.clone().try_inverse().unwrap();
        let split = core_nilpotent(&d, CoreNilpotentOptions::default()).unwrap();
        prop_assert_eq!((split.n1, split.n2), (n1, n2));
        let mut rebuilt = Matrix::zeros(n, n);
        rebuilt.view_mut((0, 0), (n1, n1)).copy_from(&split.e1_hat);
        rebuilt.view_mut((n1, n1), (n2, n2)).copy_from(&split.e2_hat);
        let back = &split.t_hat * rebuilt * &split.t_hat_inv;
        prop_assert!(rel(&back, &d) < 1e-8);
        let mut nil_pow = split.e2_hat.clone();
        for _ in 1..split.index_h.max(1) {
            nil_pow = &nil_pow * &split.e2_hat;
        }
        prop_assert!(n2 == 0 || nil_pow.amax() < 1e-8);
    }

    #[test]
    fn truncated_svd_reproduces_input(seed in 0u64..10_000, rows in 1usize..7, cols in 1usize..7, rank in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rank.min(rows).min(cols);
        let m = random_matrix(&mut rng, rows, k) * random_matrix(&mut rng, k, cols);
        let decision = rank_with_tolerance(&m, RankTolerance::Auto).unwrap();
        prop_assert_eq!(decision.rank, k);
        let approx = ddesc_core::kernels::truncate_rank(&m, decision.rank).unwrap();
        let next = decision.singular_values.get(decision.rank).copied().unwrap_or(0.0);
        let err = ddesc_core::kernels::spectral_norm(&(&m - approx)).unwrap();
        prop_assert!(err <= next + 10.0 * decision.tolerance_used + 1e-15);
    }

    #[test]
    fn data_shift_identity_and_rank(seed in 0u64..10_000) {
        let gp = generate_plant(&PlantSpec::default(), seed);
        let s0 = plant_shift(&gp.sys).unwrap();
        let mut plant = SimulatedPlant::new(gp.sys.clone(), 0.0).unwrap();
        let cfg = config_for(&gp.sys, s0, seed);
        let (e1, _, d) = collect_data_matrices(&mut plant, &cfg).unwrap();
        let n = gp.sys.n();
        prop_assert!(rel(&d.d_a, &(&d.d_e * s0 - Matrix::identity(n, n))) < 1e-8);
        // rank(M) == rank(E), counting E's rank from its construction.
        let rank_e = gp.n1 + gp.n_f.clone().row_iter().filter(|r| r.amax() > 0.0).count();
        let rank_m = rank_with_tolerance(&e1.m_mat, RankTolerance::Auto).unwrap().rank;
        prop_assert_eq!(rank_m, rank_e);
        // E N = (s0 E - A) M and (s0 E - A) V = A W.
        let pencil = gp.sys.pencil_at(s0);
        let lhs = &gp.sys.e * &e1.n_mat;
        prop_assert!(rel(&lhs, &(&pencil * &e1.m_mat)) < 1e-8);
        prop_assert!(rel(&(&pencil * &e1.v_mat), &(&gp.sys.a * &e1.w_mat)) < 1e-8);
    }

    #[test]
    fn noise_free_simulation_satisfies_the_model(seed in 0u64..10_000, steps in 1usize..40) {
        let gp = generate_plant(&PlantSpec::default(), seed);
        let s0 = plant_shift(&gp.sys).unwrap();
        let form = slow_fast_decompose(&gp.sys, s0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let x0 = Vector::from_fn(form.n1, |_, _| rng.gen_range(-1.0..1.0));
        let inputs: Vec<Vector> = (0..steps + form.index_h)
            .map(|_| Vector::from_fn(gp.sys.m(), |_, _| rng.gen_range(0.0..1.0)))
            .collect();
        let traj = simulate(&form, &x0, &inputs, steps, None).unwrap();
        let scale = traj.states.iter().map(|x| x.amax()).fold(1.0, f64::max);
        for k in 0..steps {
            let r = &gp.sys.e * &traj.states[k + 1] - &gp.sys.a * &traj.states[k] - &gp.sys.b * &traj.inputs[k];
            prop_assert!(r.amax() <= 1e-10 * scale, "step {} residual {}", k, r.amax());
        }
    }

    #[test]
    fn experiments_are_deterministic(seed in 0u64..1000) {
        let gp = generate_plant(&PlantSpec::default(), seed);
        let s0 = plant_shift(&gp.sys).unwrap();
        let cfg = config_for(&gp.sys, s0, seed);
        let run = || {
            let mut plant = SimulatedPlant::new(gp.sys.clone(), 0.0).unwrap();
            run_experiment1(&mut plant, &cfg).unwrap().m_mat
        };
        prop_assert_eq!(run(), run());
    }
}
