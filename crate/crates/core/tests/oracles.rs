//! Library results checked against independent computations: characteristic
//! polynomials, brute-force gain grids, subspace angles, and the noise model.

use ddesc_core::analysis::identify_type;
use ddesc_core::campaign::{generate_plant, plant_shift, r_controllable_plants, PlantSpec};
use ddesc_core::experiments::{
    collect_data_matrices, run_experiment1, run_experiment3, Experiment3Data,
};
use ddesc_core::kernels::{eigenvalues, pseudo_inverse, singular_values, spectral_norm, vstack};
use ddesc_core::lmi::LmiOptions;
use ddesc_core::model::{slow_fast_decompose, Trajectory};
use ddesc_core::stabilization::{data_decompose, stabilize};
use ddesc_core::{
    DescriptorSystem, ExperimentConfig, Matrix, NoiseMode, RankTolerance, SimulatedPlant,
    SystemKind, C64,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Characteristic polynomial coefficients `[c_0 = 1, c_1, .., c_n]` of
/// `det(lambda I - A) = sum c_k lambda^{n-k}` by Faddeev-LeVerrier.
fn faddeev_leverrier(a: &Matrix) -> Vec<f64> {
    let n = a.nrows();
    let mut coeffs = vec![1.0];
    let mut m = Matrix::zeros(n, n);
    for k in 1..=n {
        m = a * &m + Matrix::identity(n, n) * coeffs[k - 1];
        let c = -(a * &m).trace() / k as f64;
        coeffs.push(c);
    }
    coeffs
}

fn poly_at(coeffs: &[f64], z: C64) -> C64 {
    coeffs
        .iter()
        .fold(C64::new(0.0, 0.0), |acc, &c| acc * z + c)
}

#[test]
fn eigenvalues_are_roots_of_the_characteristic_polynomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let n = rng.gen_range(1..7);
        let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let coeffs = faddeev_leverrier(&a);
        let eig = eigenvalues(&a).unwrap();
        assert_eq!(eig.len(), n);
        // Coefficients of prod (z - lambda_i) must match as well: the
        // multiset, not just membership, is checked.
        let mut prod = vec![C64::new(1.0, 0.0)];
        for &l in &eig {
            let mut next = vec![C64::new(0.0, 0.0); prod.len() + 1];
            for (i, &c) in prod.iter().enumerate() {
                next[i] += c;
                next[i + 1] -= c * l;
            }
            prod = next;
        }
        for (c, p) in coeffs.iter().zip(&prod) {
            assert!((p - c).norm() < 1e-9, "{coeffs:?} vs {prod:?}");
        }
        for &l in &eig {
            let scale = 1.0 + l.norm().powi(n as i32);
            assert!(poly_at(&coeffs, l).norm() < 1e-9 * scale);
        }
    }
}

/// Scalar plant `x+ = 0.5 x + u` recorded as a normal descriptor system.
fn scalar_run(seed: u64) -> (DescriptorSystem, Experiment3Data) {
    let sys = DescriptorSystem::new(
        Matrix::from_element(1, 1, 1.0),
        Matrix::from_element(1, 1, 0.5),
        Matrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    let mut plant = SimulatedPlant::new(sys.clone(), 0.0).unwrap();
    let cfg = ExperimentConfig {
        horizon: 12,
        seed,
        ..Default::default()
    };
    (sys, run_experiment3(&mut plant, &cfg).unwrap())
}

#[test]
fn scalar_gain_lies_in_the_brute_force_stabilizing_interval() {
    // Grid over K: stabilizing iff |0.5 + K| < 1.
    let grid: Vec<f64> = (-3000..=3000).map(|i| i as f64 * 1e-3).collect();
    let stabilizing: Vec<f64> = grid
        .iter()
        .copied()
        .filter(|k| (0.5 + k).abs() < 1.0)
        .collect();
    let (lo, hi) = (stabilizing[0], *stabilizing.last().unwrap());
    for seed in 0..10 {
        let (sys, e3) = scalar_run(seed);
        let mut plant = SimulatedPlant::new(sys, 0.0).unwrap();
        let cfg = ExperimentConfig {
            seed,
            ..Default::default()
        };
        let (_, _, d) = collect_data_matrices(&mut plant, &cfg).unwrap();
        let (sd, res) = stabilize(&d, &e3, None, &LmiOptions::default()).unwrap();
        let k = res.k[(0, 0)];
        assert!(
            k > lo - 1e-3 && k < hi + 1e-3,
            "K = {k} outside [{lo}, {hi}]"
        );
        assert!((0.5 + k).abs() < 1.0);
        // K = K_s / P_11 for a one-dimensional slow space.
        assert!((k - res.k_s[(0, 0)] / sd.p[(0, 0)]).abs() < 1e-12);
    }
}

/// Largest principal angle (radians) between the column spaces of `a`, `b`.
fn max_principal_angle(a: &Matrix, b: &Matrix) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = singular_values(&(qa.transpose() * qb)).unwrap();
    let smallest = s.last().copied().unwrap_or(1.0).min(1.0);
    smallest.acos()
}

#[test]
fn data_slow_subspace_matches_the_model() {
    for gp in r_controllable_plants(&PlantSpec::default(), 7000, 20) {
        let s0 = plant_shift(&gp.sys).unwrap();
        let cfg = ExperimentConfig {
            s0,
            horizon: 2 * ExperimentConfig::min_horizon(gp.sys.n(), gp.sys.m()),
            seed: gp.seed,
            ..Default::default()
        };
        let mut plant = SimulatedPlant::new(gp.sys.clone(), 0.0).unwrap();
        let (_, _, d) = collect_data_matrices(&mut plant, &cfg).unwrap();
        let e3 = run_experiment3(&mut plant, &cfg).unwrap();
        let sd = data_decompose(&d, &e3, None).unwrap();
        let form = slow_fast_decompose(&gp.sys, s0).unwrap();
        assert_eq!((sd.n1, sd.n2), (form.n1, form.n2));
        let slow_data = sd.p.columns(0, sd.n1).into_owned();
        let slow_model = form.p.columns(0, form.n1).into_owned();
        assert!(
            max_principal_angle(&slow_data, &slow_model) < 1e-6,
            "seed {}",
            gp.seed
        );
        if sd.n2 > 0 {
            let fast_data = sd.p.columns(sd.n1, sd.n2).into_owned();
            let fast_model = form.p.columns(form.n1, form.n2).into_owned();
            assert!(
                max_principal_angle(&fast_data, &fast_model) < 1e-6,
                "seed {}",
                gp.seed
            );
        }

        // Slow rows obey a linear recursion: recover [B_s A_s] by least squares.
        let stacked = vstack(&[&sd.u_minus, &sd.xs_minus]);
        let ba = &sd.xs_plus * pseudo_inverse(&stacked, RankTolerance::Auto).unwrap();
        let residual = &sd.xs_plus - &ba * &stacked;
        assert!(
            residual.norm() <= 1e-8 * sd.xs_plus.norm().max(1.0),
            "seed {}",
            gp.seed
        );
    }
}

#[test]
fn noisy_steps_stay_within_the_noise_bound() {
    let sys = DescriptorSystem::circuit(1.0, 1.0, 1.0);
    let mut plant = SimulatedPlant::new(sys.clone(), 0.01).unwrap();
    let cfg = ExperimentConfig {
        noise_scale: 0.01,
        seed: 3,
        ..Default::default()
    };
    let e1 = run_experiment1(&mut plant, &cfg).unwrap();
    let mut worst = 0.0_f64;
    for t in &e1.trajectories {
        worst = worst.max(step_residual(&sys, t));
    }
    assert!(worst <= 0.01 + 1e-12, "residual {worst}");
    assert!(worst > 1e-4, "noise was not injected");
}

fn step_residual(sys: &DescriptorSystem, t: &Trajectory) -> f64 {
    (0..t.len())
        .map(|k| (&sys.e * &t.states[k + 1] - &sys.a * &t.states[k] - &sys.b * &t.inputs[k]).amax())
        .fold(0.0, f64::max)
}

#[test]
fn identity_plant_is_controllable_and_normal() {
    let n = 3;
    let sys = DescriptorSystem::new(
        Matrix::identity(n, n),
        Matrix::identity(n, n) * 0.9,
        Matrix::identity(n, n),
    )
    .unwrap();
    let mut plant = SimulatedPlant::new(sys, 0.0).unwrap();
    let (e1, _, d) = collect_data_matrices(&mut plant, &ExperimentConfig::default()).unwrap();
    let ty = identify_type(&e1.m_mat, NoiseMode::Off(RankTolerance::Auto)).unwrap();
    assert_eq!(ty.kind, SystemKind::Normal);
    let rep =
        ddesc_core::analysis::data_report(&d, ty.rank_e_estimate, RankTolerance::Auto).unwrap();
    let v = rep.verdicts(n);
    assert!(v.normal && v.c_controllable && v.causal && v.y_controllable && v.r_controllable);
    assert!(spectral_norm(&d.d_e).unwrap() > 0.0);
}

/// Sign test: across seeds, the gap `sigma2 / sigma3` of the noisy `M` should
/// not shrink as the sub-experiment length grows.
#[test]
fn noise_gap_widens_with_experiment_length() {
    let sys = DescriptorSystem::circuit(1.0, 1.0, 1.0);
    let gap = |l: usize, seed: u64| {
        let mut plant = SimulatedPlant::new(sys.clone(), 0.01).unwrap();
        let cfg = ExperimentConfig {
            l,
            noise_scale: 0.01,
            seed,
            ..Default::default()
        };
        let s = singular_values(&run_experiment1(&mut plant, &cfg).unwrap().m_mat).unwrap();
        s[1] / s[2]
    };
    let seeds = 20;
    let mut ups = [0; 2];
    for seed in 0..seeds {
        let g = [gap(4, seed), gap(100, seed), gap(1000, seed)];
        ups[0] += usize::from(g[1] >= g[0]);
        ups[1] += usize::from(g[2] >= g[1]);
    }
    // One-sided sign test at 5%: at least 15 of 20 pairs must not decrease.
    assert!(
        ups.iter().all(|&u| u >= 15),
        "non-decreasing pairs {ups:?} of {seeds}"
    );
}

#[test]
fn generated_plant_spectrum_matches_its_slow_block() {
    for seed in 0..30 {
        let gp = generate_plant(&PlantSpec::default(), seed);
        let s0 = plant_shift(&gp.sys).unwrap();
        let inv = ddesc_core::model::certify_shift(&gp.sys, s0).unwrap();
        let finite = ddesc_core::kernels::finite_generalized_eigenvalues(
            &(&inv * &gp.sys.e),
            s0,
            Default::default(),
        )
        .unwrap();
        // Roots of the slow block's characteristic polynomial.
        let coeffs = faddeev_leverrier(&gp.a_s);
        for z in &finite.finite {
            assert!(
                poly_at(&coeffs, *z).norm() < 1e-7 * (1.0 + z.norm().powi(gp.n1 as i32)),
                "seed {seed}"
            );
        }
        assert_eq!(finite.finite.len(), gp.n1);
        assert_eq!(finite.infinite_count, gp.n2);
    }
}
