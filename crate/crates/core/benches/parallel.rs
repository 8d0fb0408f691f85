//! Thread-count comparison of the data-parallel kernels.
//!
//! `cargo bench -p cdp-core` runs each kernel inside a one-thread rayon pool
//! and inside a pool sized to the machine. `--no-default-features` builds the
//! purely sequential fallback for a third data point.

use std::hint::black_box;

use cdp_core::eval;
use cdp_core::imaging::{self, ImageTensor};
use cdp_core::losses::{self, LossConfig};
use cdp_core::model::{EmbeddingModel, ForwardMode, ModelConfig};
use cdp_core::{rng, Matrix};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let wide = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut sizes = vec![1];
    if wide > 1 {
        sizes.push(wide);
    }
    sizes
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            (format!("{n}-threads"), pool)
        })
        .collect()
}

fn batch(n: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(1, &[]);
    (0..n)
        .map(|_| {
            let data = (0..64 * 32 * 3).map(|_| r.random::<u8>()).collect();
            let img = ImageTensor::from_u8(64, 32, 3, data).unwrap();
            imaging::normalize(&img).unwrap().to_planar()
        })
        .collect()
}

fn training_step(c: &mut Criterion) {
    let model = EmbeddingModel::new(ModelConfig::new(20)).unwrap();
    let inputs = batch(64);
    let labels: Vec<usize> = (0..64).map(|i| (i / 4) % 8).collect();
    let cfg = LossConfig::default();
    let mut group = c.benchmark_group("forward_backward_64");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| {
                b.iter(|| {
                    let out = model.forward_planar(&inputs, ForwardMode::Train { dropout_seed: 3 }).unwrap();
                    let loss = losses::total_loss(&out.logits, &out.embeddings, 32, &labels, &cfg).unwrap();
                    black_box(model.backward(&out.trace, &loss.grad_embeddings, &loss.grad_logits).unwrap())
                })
            })
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut r = rng::stream(2, &[]);
    let mut random = |n: usize| {
        let data = (0..n * 32).map(|_| r.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(n, 32, data).unwrap()
    };
    let (q, g) = (random(400), random(400));
    let mut group = c.benchmark_group("distance_matrix_400x400");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| black_box(eval::distance_matrix(&q, &g).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, training_step, retrieval);
criterion_main!(benches);
