use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use cmc_bench::{trainer, training_set};
use cmc_core::decoding::dp_best_span;
use cmc_core::pipeline::predict_dialogue;
use cmc_core::{EvalOptions, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let a = Tensor::new(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("dp_best_span");
    for t in [64, 384, 4096] {
        let ps: Vec<f64> = (0..t).map(|_| rng.gen()).collect();
        let pe: Vec<f64> = (0..t).map(|_| rng.gen()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |bench, _| {
            bench.iter(|| black_box(dp_best_span(&ps, &pe, 30).unwrap()))
        });
    }
    group.finish();
}

fn predict(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict_dialogue");
    group.sample_size(10);
    for k in [0, 1, 2] {
        let (t, corpus) = trainer(k, 32);
        let predictor = t.predictor();
        let dialogue = &corpus.dialogues[0];
        group.bench_with_input(BenchmarkId::new("k", k), &k, |bench, _| {
            bench.iter(|| black_box(predict_dialogue(&predictor, dialogue, &EvalOptions::default()).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let (mut t, corpus) = trainer(2, 32);
    let set = training_set(&t, &corpus);
    let batch: Vec<usize> = (0..8).collect();
    group.bench_function("k2_d32_batch8", |bench| bench.iter(|| black_box(t.step(&set, &batch, 0).unwrap())));
    group.finish();
}

criterion_group!(benches, matmul, decoding, predict, train_step);
criterion_main!(benches);
