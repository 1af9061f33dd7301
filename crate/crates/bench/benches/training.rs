use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use qrecon_bench::fixture;
use qrecon_core::activation::tanh_into;
use qrecon_core::forward_fd::{solve_neumann, FaceFluxes, Grid2D};
use qrecon_core::geometry::{sample_interior, BoxDomain};
use qrecon_core::network::{init_params, mlp_forward_with_jacobian_batch, MlpSpec};
use qrecon_core::optimize::AdamState;

fn loss(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss");
    g.sample_size(10);
    for id in ["neu1", "diri1", "neudim5"] {
        let (assembly, nets) = fixture(id, 2000);
        g.bench_with_input(BenchmarkId::new("value", id), &(), |b, _| {
            b.iter(|| assembly.evaluate(black_box(&nets)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("value_and_gradient", id), &(), |b, _| {
            b.iter(|| assembly.evaluate_with_gradient(black_box(&nets)).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let spec = MlpSpec::new(2, vec![26, 26, 26, 10], 2).unwrap();
    let params = init_params(&spec, 3);
    let x = sample_interior(&BoxDomain::cube(2, 0.0, 1.0).unwrap(), 1024, 5).unwrap();
    c.bench_function("mlp_jacobian_1024", |b| {
        b.iter(|| mlp_forward_with_jacobian_batch(&spec, &params, black_box(x.view())).unwrap())
    });

    let src: Vec<f64> = (0..4096).map(|i| (i as f64 - 2048.0) / 300.0).collect();
    let mut dst = vec![0.0; src.len()];
    c.bench_function("tanh_4096", |b| b.iter(|| tanh_into(black_box(&src), &mut dst)));

    let n = 2 * params.len();
    let grad: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
    let mut p = vec![0.0; n];
    let mut adam = AdamState::new(n);
    c.bench_function("adam_step", |b| b.iter(|| adam.step(&mut p, black_box(&grad), 1e-3).unwrap()));
}

fn forward_solver(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_fd");
    g.sample_size(10);
    for n in [32usize, 64, 128] {
        let b = [0.0, 1.0, 0.0, 1.0];
        let q = Grid2D::from_fn(n, n, b, |_, y| 1.0 + 0.5 * y).unwrap();
        let f = Grid2D::from_fn(n, n, b, |_, _| 0.0).unwrap();
        let flux = FaceFluxes::from_fn(&q, |p, nrm| (1.0 + 0.5 * p[1]) * nrm[0]);
        g.bench_with_input(BenchmarkId::new("solve_neumann", n), &n, |bch, _| {
            bch.iter(|| solve_neumann(&q, &f, &flux).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, loss, network, forward_solver);
criterion_main!(benches);
