//! Rayon data-parallel core against a single-worker pool on the same work.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;

use stad_core::dynamics::{analytic_gaussian_field, ScheduleSpec};
use stad_core::odelik::{likelihood_solver, log_likelihood_batch, DivergenceBackend};
use stad_core::trace::{benchmark_errors, Estimator};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn trace_trials(c: &mut Criterion) {
    let mut g = c.benchmark_group("trace_benchmark_d64");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("xtrace_m16", name), |b| {
            b.iter(|| pool.install(|| benchmark_errors(Estimator::Xtrace, 64, 8, true, 64, 1).unwrap()))
        });
    }
    g.finish();
}

fn likelihood_batch(c: &mut Criterion) {
    let cov = DMatrix::from_row_slice(3, 3, &[1.4, 0.3, -0.2, 0.3, 0.9, 0.1, -0.2, 0.1, 0.5]);
    let field = analytic_gaussian_field(vec![1.0, -0.5, 0.25], cov, ScheduleSpec::vp()).unwrap();
    let data = field.target.sample(32, 2);
    let solver = likelihood_solver(3, 1e-5, 1e-5);
    let mut g = c.benchmark_group("loglik_exact_32_points");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(name, |b| {
            b.iter(|| pool.install(|| log_likelihood_batch(&field, &DivergenceBackend::exact(), &data, &solver, 0).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, trace_trials, likelihood_batch);
criterion_main!(benches);
