use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rim_core::linear::{estimate_lyapunov, estimate_window_dichotomy, CocycleParams, LinearCocycle};
use rim_core::noise::NoiseSettings;
use rim_core::nonlinear::{CutoffField, NonlinearField};
use rim_core::par::Exec;
use rim_core::perron::{LpConfig, LpProblem};
use rim_core::spectral::{make_splitting, shifted_dirichlet_laplacian, Side, StateVector};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn params() -> Arc<CocycleParams> {
    let d = vec![vec![0.5, -0.3, 0.8, 0.1], vec![-0.4, 0.6, 0.2, -0.7]];
    Arc::new(CocycleParams::new(shifted_dirichlet_laplacian(4, 2.0).unwrap(), d, vec![1.0, 1.0]).unwrap())
}

fn settings(t_min: f64, t_max: f64) -> NoiseSettings {
    NoiseSettings {
        nus: vec![1.0, 1.0],
        dt: 0.01,
        t_min,
        t_max,
        burn_in: 10.0,
    }
}

fn lyapunov_sweep(c: &mut Criterion) {
    let p = params();
    let seeds: Vec<u64> = (0..16).collect();
    let mut group = c.benchmark_group("lyapunov_sweep");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec.map(&seeds, |&seed| {
                    let spec = LinearCocycle::generate(p.clone(), seed, &settings(-10.0, 200.0)).unwrap();
                    estimate_lyapunov(&spec, 200.0).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn manifold_anchors(c: &mut Criterion) {
    let spec = LinearCocycle::generate(params(), 3, &settings(-30.0, 20.0)).unwrap();
    let split = make_splitting(spec.model(), 0.0).unwrap();
    let dich = estimate_window_dichotomy(&spec, &split, 0.3, -20.0, 20.0).unwrap();
    let cfg = LpConfig { t_lp: 20.0, dt_lp: 0.01, ..LpConfig::default() };
    let field = CutoffField::new(NonlinearField::lipschitz_mixed(4, 0.01), 1.0).unwrap();
    let prob = LpProblem::new(&spec, &field, &split, &dich, &cfg).unwrap();
    let limit = field.rho() / (4.0 * dich.k);
    let anchors: Vec<StateVector> = (0..16)
        .map(|k| StateVector(vec![limit * (k as f64 / 8.0 - 1.0), 0.0, 0.0, 0.0]))
        .collect();
    let mut group = c.benchmark_group("manifold_anchors");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(prob.solve_many(Side::Unstable, &anchors, exec)))
        });
    }
    group.finish();
}

criterion_group!(benches, lyapunov_sweep, manifold_anchors);
criterion_main!(benches);
