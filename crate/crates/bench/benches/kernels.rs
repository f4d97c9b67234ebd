use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mfpca::engines::{fit_mfvb, fit_vmp};
use mfpca::fragment::run_fragment;
use mfpca::model::{initialize_state, Designs};
use mfpca::postprocess::orthonormalize_on;
use mfpca::splines::EvaluationGrid;
use mfpca_bench::{fixture, hyper};

fn fragment(c: &mut Criterion) {
    let mut group = c.benchmark_group("fragment");
    for n in [50, 200] {
        let (data, bases) = fixture(n, 3);
        let designs = Designs::new(&data, &bases).unwrap();
        let state = initialize_state(&data, &designs, &hyper(4)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| run_fragment(&state, &designs).unwrap())
        });
    }
    group.finish();
}

fn fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.measurement_time(Duration::from_secs(10));
    let (data, bases) = fixture(50, 3);
    let h = hyper(4);
    group.bench_function("mfvb", |b| b.iter(|| fit_mfvb(&data, &bases, &h).unwrap()));
    group.bench_function("vmp", |b| b.iter(|| fit_vmp(&data, &bases, &h).unwrap()));
    group.finish();
}

fn orthonormalize(c: &mut Criterion) {
    let mut group = c.benchmark_group("orthonormalize");
    let (data, bases) = fixture(100, 3);
    let raw = fit_mfvb(&data, &bases, &hyper(6)).unwrap();
    for n_g in [200, 1000] {
        let grid = EvaluationGrid::new(n_g).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n_g), &n_g, |b, _| {
            b.iter(|| orthonormalize_on(&raw, &bases, &grid).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, fragment, fit, orthonormalize);
criterion_main!(benches);
