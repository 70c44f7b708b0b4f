use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use num_complex::Complex64;
use vpb_core::{
    apply_gamma, apply_l, assemble_mode_operator, build_grid, nonlinear_rhs, solve_stationary,
    BackendSpec, GridStrategy, Projection, StationaryConfig, TorusBench,
};

fn projections(c: &mut Criterion) {
    let mut group = c.benchmark_group("project_p");
    for order in [8, 16] {
        let g = build_grid(3, order, GridStrategy::GaussHermiteTensor).unwrap();
        let u: Vec<f64> = (0..g.len())
            .map(|i| (i as f64).sin() * g.sqrt_m()[i])
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(order), &u, |b, u| {
            b.iter(|| g.project(black_box(u), Projection::P).unwrap())
        });
    }
    group.finish();
}

fn collision(c: &mut Criterion) {
    let backend = BackendSpec::surrogate(3, 8).build().unwrap();
    let g = backend.grid();
    let u: Vec<f64> = (0..g.len())
        .map(|i| (0.3 * i as f64).cos() * g.sqrt_m()[i])
        .collect();
    c.bench_function("surrogate_apply_l", |b| {
        b.iter(|| apply_l(&backend, black_box(&u)).unwrap())
    });
    c.bench_function("surrogate_apply_gamma", |b| {
        b.iter(|| apply_gamma(&backend, black_box(&u), black_box(&u)).unwrap())
    });
}

fn mode_generator(c: &mut Criterion) {
    let backend = BackendSpec::surrogate(3, 8).build().unwrap();
    let op = assemble_mode_operator(&[1.0, 0.0, 0.0], backend.clone()).unwrap();
    let g = backend.grid();
    let u: Vec<Complex64> = (0..g.len())
        .map(|i| Complex64::new(g.sqrt_m()[i], 0.0))
        .collect();
    c.bench_function("mode_apply", |b| {
        b.iter(|| op.apply(black_box(&u)).unwrap())
    });
}

fn torus_rhs(c: &mut Criterion) {
    let bench = TorusBench::new(BackendSpec::surrogate(3, 4).build().unwrap(), 9).unwrap();
    let nv = bench.grid().len();
    let sm = bench.grid().sqrt_m().to_vec();
    let u: Vec<f64> = (0..bench.nx() * nv)
        .map(|n| 1e-3 * ((n / nv) as f64).sin() * sm[n % nv])
        .collect();
    let state = bench.state(u, 0.0).unwrap();
    c.bench_function("nonlinear_rhs", |b| {
        b.iter(|| nonlinear_rhs(&bench, black_box(&state)).unwrap())
    });
}

fn stationary(c: &mut Criterion) {
    let cfg = StationaryConfig::default();
    c.bench_function("stationary_newton", |b| {
        b.iter(|| solve_stationary(black_box(&cfg)).unwrap())
    });
}

criterion_group!(
    benches,
    projections,
    collision,
    mode_generator,
    torus_rhs,
    stationary
);
criterion_main!(benches);
