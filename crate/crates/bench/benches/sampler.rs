use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use swaplm_bench::{fixture, CLUSTERS};
use swaplm_core::objectives::{corrupt_crts, corrupt_rts};
use swaplm_core::rng;
use swaplm_core::{CountMatrix, Objective, ObjectiveConfig};

fn sampler(c: &mut Criterion) {
    let fx = fixture();
    // Skewed rows, far from the uniform start.
    let f = Array2::from_shape_fn((CLUSTERS, CLUSTERS), |(i, j)| ((i * 7 + j * 13) % 11) as i64 - 5);
    let cm = CountMatrix::from_counts(f, 2.0).unwrap();
    let sampler = cm.sampler(&fx.clusters).unwrap();
    let alpha = fx.vocab.regular_ids().nth(3).unwrap();
    let mut r = rng::stream(0, &[1]);

    c.bench_function("sample_replacement", |b| {
        b.iter(|| sampler.sample(black_box(alpha), &mut r).unwrap())
    });
    c.bench_function("sampler_snapshot", |b| {
        b.iter(|| cm.sampler(black_box(&fx.clusters)).unwrap())
    });

    let batch = &fx.batches[0];
    let crts = ObjectiveConfig::new(Objective::Crts);
    let rts = ObjectiveConfig::new(Objective::Rts);
    c.bench_function("corrupt_crts_batch", |b| {
        b.iter(|| corrupt_crts(black_box(batch), &sampler, &crts, &mut r).unwrap())
    });
    c.bench_function("corrupt_rts_batch", |b| {
        b.iter(|| corrupt_rts(black_box(batch), &fx.vocab, &rts, &mut r).unwrap())
    });
}

criterion_group!(benches, sampler);
criterion_main!(benches);
