use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gvfield::dynamics::{self, PendulumParams, PendulumSetup};
use gvfield::inference::exact_posterior_fit;
use gvfield::projected::sample_prior_field;
use gvfield::wind::{self, WindModelConfig};
use gvfield::{seed, AnyScalarKernel, KernelFamily, Manifold, MatrixKernel, ProjectedKernel, ScalarKernel, VectorField, VectorObservationSet};
use nalgebra::DVector;

fn kernel(manifold: Manifold, family: KernelFamily, ls: &[f64]) -> ProjectedKernel<AnyScalarKernel> {
    ProjectedKernel::new(AnyScalarKernel::build(&manifold, family, ls, 1.0, None).unwrap())
}

fn points(manifold: &Manifold, n: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(7);
    (0..n).map(|_| manifold.sample_point(&mut rng)).collect()
}

fn scalar_eval(c: &mut Criterion) {
    for (name, k) in [
        ("sphere matern32", kernel(Manifold::Sphere, KernelFamily::Matern32, &[0.4])),
        ("cylinder se", kernel(Manifold::cylinder(), KernelFamily::SquaredExponential, &[0.3, 1.2])),
        ("torus matern52", kernel(Manifold::torus(), KernelFamily::Matern52, &[0.8])),
    ] {
        let xs = points(k.manifold(), 2);
        c.bench_function(&format!("scalar eval / {name}"), |b| {
            b.iter(|| k.scalar().eval(black_box(&xs[0]), black_box(&xs[1])).unwrap())
        });
    }
}

fn gram(c: &mut Criterion) {
    let k = kernel(Manifold::Sphere, KernelFamily::Matern32, &[0.4]);
    let xs = points(&Manifold::Sphere, 100);
    c.bench_function("projected gram / sphere n=100", |b| b.iter(|| k.gram(black_box(&xs)).unwrap()));
}

fn prior_sampling(c: &mut Criterion) {
    let k = kernel(Manifold::cylinder(), KernelFamily::SquaredExponential, &[0.3, 1.2]);
    c.bench_function("prior draw / cylinder 512 features", |b| {
        b.iter(|| sample_prior_field(&k, 512, black_box(3)).unwrap())
    });
    let sample = sample_prior_field(&k, 512, 3).unwrap();
    let x = [1.0, 0.5];
    c.bench_function("prior eval / cylinder 512 features", |b| b.iter(|| sample.eval(black_box(&x)).unwrap()));
}

fn exact_fit(c: &mut Criterion) {
    let k = kernel(Manifold::Sphere, KernelFamily::Matern32, &[0.4]);
    let xs = points(&Manifold::Sphere, 200);
    let values = (0..xs.len()).map(|i| DVector::from_vec(vec![(i as f64).sin(), (i as f64).cos()])).collect();
    let obs = VectorObservationSet::new(xs, values, 0.01).unwrap();
    c.bench_function("exact posterior fit / sphere n=200", |b| {
        b.iter_batched(|| obs.clone(), |o| exact_posterior_fit(&k, o).unwrap(), BatchSize::SmallInput)
    });
}

fn dynamics_benches(c: &mut Criterion) {
    let params = PendulumParams::default();
    c.bench_function("leapfrog / 1000 steps", |b| {
        b.iter(|| dynamics::leapfrog_rollout(&params, black_box(2.0), 0.0, 1000).unwrap())
    });
    let setup = PendulumSetup::default();
    c.bench_function("pendulum seam report", |b| b.iter(|| dynamics::pendulum_seam_report(&setup, 1e-3).unwrap()));
}

fn wind_benches(c: &mut Criterion) {
    let mut group = c.benchmark_group("wind");
    group.sample_size(10);
    group.bench_function("synthetic run", |b| {
        b.iter(|| wind::run_synthetic(black_box(0), &WindModelConfig::default(), 60).unwrap())
    });
    group.finish();
}

criterion_group!(benches, scalar_eval, gram, prior_sampling, exact_fit, dynamics_benches, wind_benches);
criterion_main!(benches);
