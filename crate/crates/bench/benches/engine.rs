use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nsp_bench::{environment, gate_examples, passage, program, span_bags};
use nsp_core::ensemble::gate_train;
use nsp_core::metrics::instance_scores;
use nsp_core::program::format;
use nsp_core::{evaluate, parse, NumberLexicon, Role, TrainConfig, Tagger};

fn bench_parse(c: &mut Criterion) {
    let mut group = c.benchmark_group("parse");
    for depth in [2, 6, 10] {
        let text = format(&program(depth));
        group.bench_with_input(BenchmarkId::from_parameter(depth), &text, |b, t| b.iter(|| parse(black_box(t))));
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let env = environment();
    let mut group = c.benchmark_group("evaluate");
    for depth in [2, 6, 10] {
        let p = program(depth);
        group.bench_with_input(BenchmarkId::from_parameter(depth), &p, |b, p| b.iter(|| evaluate(black_box(p), &env)));
    }
    group.finish();
}

fn bench_tag(c: &mut Criterion) {
    let tagger = Tagger::new(&NumberLexicon::default());
    let mut group = c.benchmark_group("tag");
    for sentences in [1, 10, 100] {
        let text = passage(sentences);
        group.bench_with_input(BenchmarkId::from_parameter(sentences), &text, |b, t| {
            b.iter(|| tagger.tag(black_box(t), Role::Passage, 1))
        });
    }
    group.finish();
}

fn bench_instance_scores(c: &mut Criterion) {
    let mut group = c.benchmark_group("instance_scores");
    for n in [1, 4, 16] {
        let (pred, gold) = span_bags(n);
        group.bench_function(BenchmarkId::from_parameter(n), |b| b.iter(|| instance_scores(black_box(&pred), &gold)));
    }
    group.finish();
}

fn bench_gate_train(c: &mut Criterion) {
    let data = gate_examples(1000);
    let config = TrainConfig {
        learning_rate: 0.5,
        epochs: 50,
        seed: 0,
        l2: 0.0,
    };
    c.bench_function("gate_train/1000x50", |b| b.iter(|| gate_train(black_box(&data), &config)));
}

criterion_group!(benches, bench_parse, bench_evaluate, bench_tag, bench_instance_scores, bench_gate_train);
criterion_main!(benches);
