//! Data-parallel kernels against their sequential equivalents.
//!
//! Each group runs the library call on the default rayon pool, on a
//! one-thread pool, and as a plain iterator loop matching the
//! `--no-default-features` fallback. Building with `--no-default-features`
//! turns the first two into the fallback itself.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal::cmsupcon::{supcon_loss_and_grad, BatchFeatures, LossConfig};
use xmodal::codecsim::transform_image;
use xmodal::forensics::{dct_ac_histogram, mean_profile, mean_rapsd, rapsd, DctHistConfig, Window};
use xmodal::{ImageBuffer, Label, Matrix, Modality};

fn images(n: usize, size: usize) -> Vec<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| ImageBuffer::from_fn(size, size, 3, |_, _, _| rng.random::<f64>()))
        .collect()
}

fn batch(n: usize, d: usize) -> BatchFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let y = (0..n)
        .map(|i| if i % 2 == 0 { Label::Real } else { Label::Fake })
        .collect();
    let m = (0..n)
        .map(|i| if i % 3 == 0 { Modality::Video } else { Modality::Image })
        .collect();
    BatchFeatures::new(z, y, m).unwrap()
}

fn single_thread() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()
}

fn bench_rapsd(c: &mut Criterion) {
    let imgs = images(32, 128);
    let one = single_thread();
    let mut g = c.benchmark_group("mean_rapsd_32x128");
    g.bench_function("rayon-default", |b| {
        b.iter(|| mean_rapsd(black_box(&imgs), Window::Hann, 32).unwrap())
    });
    g.bench_function("rayon-1-thread", |b| {
        b.iter(|| one.install(|| mean_rapsd(black_box(&imgs), Window::Hann, 32).unwrap()))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| {
            let p: Vec<_> = black_box(&imgs)
                .iter()
                .map(|i| rapsd(i, Window::Hann, 32).unwrap())
                .collect();
            mean_profile(&p).unwrap()
        })
    });
    g.finish();
}

fn bench_dct(c: &mut Criterion) {
    let imgs = images(32, 128);
    let cfg = DctHistConfig::default();
    let one = single_thread();
    let mut g = c.benchmark_group("dct_ac_histogram_32x128");
    g.bench_function("rayon-default", |b| {
        b.iter(|| dct_ac_histogram(black_box(&imgs), &cfg).unwrap())
    });
    g.bench_function("rayon-1-thread", |b| {
        b.iter(|| one.install(|| dct_ac_histogram(black_box(&imgs), &cfg).unwrap()))
    });
    g.bench_function("sequential-transform", |b| {
        b.iter(|| black_box(&imgs).iter().map(transform_image).count())
    });
    g.finish();
}

fn bench_supcon(c: &mut Criterion) {
    let cfg = LossConfig::default();
    let one = single_thread();
    let mut g = c.benchmark_group("supcon_loss_and_grad");
    for n in [64usize, 256] {
        let b = batch(n, 16);
        g.bench_with_input(BenchmarkId::new("rayon-default", n), &b, |bench, b| {
            bench.iter(|| supcon_loss_and_grad(black_box(b), &cfg).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("rayon-1-thread", n), &b, |bench, b| {
            bench.iter(|| one.install(|| supcon_loss_and_grad(black_box(b), &cfg).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_rapsd, bench_dct, bench_supcon);
criterion_main!(benches);
