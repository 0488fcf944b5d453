use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scglr_bench::{context, dataset, direction, henderson_inputs};
use scglr_core::{
    goodness_of_fit, henderson_solve, maximize_component, structural_relevance, CriterionParams, Locality,
    OptimizerSettings, OrthoConstraints,
};

fn criteria(c: &mut Criterion) {
    let mut group = c.benchmark_group("criteria");
    for p in [30, 100] {
        let ds = dataset(300, p);
        let ctx = context(&ds);
        let u = direction(p);
        group.bench_with_input(BenchmarkId::new("structural_relevance", p), &p, |b, _| {
            b.iter(|| structural_relevance(black_box(&u), ds.x(), ds.weights(), Locality::Finite(4.0)))
        });
        group.bench_with_input(BenchmarkId::new("goodness_of_fit", p), &p, |b, _| {
            b.iter(|| goodness_of_fit(black_box(&u), &ctx))
        });
    }
    group.finish();
}

fn henderson(c: &mut Criterion) {
    let ds = dataset(300, 30);
    let (m, groups, z, w) = henderson_inputs(&ds, 3);
    c.bench_function("henderson_solve", |b| {
        b.iter(|| henderson_solve(black_box(&m), &groups, &z, &w, 0.5).expect("solve"))
    });
}

fn optimizer(c: &mut Criterion) {
    let mut group = c.benchmark_group("maximize_component");
    group.sample_size(10);
    let ds = dataset(300, 30);
    let ctx = context(&ds);
    let constraints = OrthoConstraints::none(ds.p());
    for restarts in [1, 10] {
        let settings = OptimizerSettings {
            n_restarts: restarts,
            ..OptimizerSettings::default()
        };
        let params = CriterionParams::new(0.5, Locality::Finite(1.0));
        group.bench_with_input(BenchmarkId::from_parameter(restarts), &restarts, |b, _| {
            b.iter(|| maximize_component(&params, &ctx, &constraints, &settings).expect("optimum"))
        });
    }
    group.finish();
}

criterion_group!(benches, criteria, henderson, optimizer);
criterion_main!(benches);
