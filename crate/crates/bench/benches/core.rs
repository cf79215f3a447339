use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qflaw_bench::{labels, scored, tables};
use qflaw_core::curation::perfect_flag;
use qflaw_core::eval::{average_precision, pr_curve};
use qflaw_core::features::{backbone_by_id, hog_features, HogConfig, RECOGNIZABILITY_BACKBONE};
use qflaw_core::recognizability::RecognizabilityHead;
use qflaw_core::stats::interrelation;
use qflaw_core::synth;

fn stats(c: &mut Criterion) {
    let t = tables(1000, 1);
    c.bench_function("interrelation x1000", |b| {
        b.iter(|| t.iter().map(|t| interrelation(black_box(t)).unwrap()).sum::<f64>())
    });
    let l = labels(5000, 2);
    c.bench_function("perfect_flag 5000", |b| b.iter(|| perfect_flag(black_box(&l), 4000).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let (s, l) = scored(10_000, 3);
    c.bench_function("average_precision 10k", |b| b.iter(|| average_precision(black_box(&s), &l).unwrap()));
    c.bench_function("pr_curve 10k", |b| b.iter(|| pr_curve(black_box(&s), &l).unwrap()));
}

fn features(c: &mut Criterion) {
    let img = synth::scene(4, 128);
    let cfg = HogConfig::default();
    c.bench_function("hog 128px", |b| b.iter(|| hog_features(black_box(&img), &cfg)));
    let bb = backbone_by_id(RECOGNIZABILITY_BACKBONE).unwrap();
    c.bench_function("backbone extract 128px", |b| b.iter(|| bb.extract(black_box(&img)).unwrap()));
    let pooled = bb.extract(&img).unwrap().global_pool();
    let head = RecognizabilityHead::new(pooled.len(), &[256], 5);
    c.bench_function("recognizability head forward", |b| {
        b.iter(|| head.forward_pooled(black_box(&pooled)).unwrap())
    });
}

criterion_group!(benches, stats, metrics, features);
criterion_main!(benches);
