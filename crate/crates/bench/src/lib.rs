//! Criterion benchmarks for the numeric kernels and the end-to-end pipeline.
//!
//! `cargo bench -p ddesc-bench`

use criterion::{black_box, BenchmarkId, Criterion};

use ddesc_core::campaign::{evaluate_plant, generate_plant, PlantSpec};
use ddesc_core::experiments::{
    collect_data_matrices, run_experiment3, DataMatrices, Experiment3Data,
};
use ddesc_core::kernels::{core_nilpotent, rank_with_tolerance, CoreNilpotentOptions};
use ddesc_core::lmi::{solve_lyapunov_lmi, LmiOptions};
use ddesc_core::stabilization::{data_decompose, stabilize};
use ddesc_core::{DescriptorSystem, ExperimentConfig, Matrix, RankTolerance, SimulatedPlant};

/// Experiment data for the RLC circuit (R = L = C = 1).
pub fn circuit_data() -> (DataMatrices, Experiment3Data) {
    let sys = DescriptorSystem::circuit(1.0, 1.0, 1.0);
    let mut plant = SimulatedPlant::new(sys, 0.0).expect("regular");
    let cfg = ExperimentConfig {
        seed: 7,
        ..Default::default()
    };
    let (_, _, d) = collect_data_matrices(&mut plant, &cfg).expect("experiments 1-2");
    let e3 = run_experiment3(&mut plant, &cfg).expect("experiment 3");
    (d, e3)
}

pub fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernels");
    for n in [4usize, 8, 16] {
        let m = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        group.bench_with_input(BenchmarkId::new("rank", n), &m, |b, m| {
            b.iter(|| rank_with_tolerance(black_box(m), RankTolerance::Auto).unwrap())
        });
    }
    let (d, e3) = circuit_data();
    group.bench_function("core_nilpotent/circuit", |b| {
        b.iter(|| core_nilpotent(black_box(&d.d_e), CoreNilpotentOptions::default()).unwrap())
    });
    let sd = data_decompose(&d, &e3, None).unwrap();
    group.bench_function("lmi/circuit", |b| {
        b.iter(|| {
            solve_lyapunov_lmi(
                black_box(&sd.xs_minus),
                black_box(&sd.xs_plus),
                &LmiOptions::default(),
            )
            .unwrap()
        })
    });
    group.finish();
}

pub fn pipeline(c: &mut Criterion) {
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(20);
    group.bench_function("circuit/stabilize", |b| {
        b.iter(|| {
            let (d, e3) = circuit_data();
            stabilize(&d, &e3, None, &LmiOptions::default()).unwrap()
        })
    });
    let spec = PlantSpec::default();
    group.bench_function("campaign/one_plant", |b| {
        let gp = generate_plant(&spec, 42);
        b.iter(|| evaluate_plant(black_box(&gp), 42))
    });
    group.finish();
}
