//! Rayon's global pool against a single-thread pool on the hot kernels.
//!
//! Build with `--no-default-features` to time the plain-iterator fallback;
//! both groups then collapse to the same sequential code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use stratgeo::intervene::{gw_distance, normalized_distance_matrix};
use stratgeo::linalg::pairwise_distances;
use stratgeo::saecore::{encode, Nonlinearity, SaeParams};
use stratgeo::strata::{agd, sspd, AgdMetric, Mode};
use stratgeo::{ActivationTensor, Tensor3};

fn points(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
}

fn pools() -> [(&'static str, rayon::ThreadPool); 2] {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    [
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()),
    ]
}

fn bench_pairwise(c: &mut Criterion) {
    let mut group = c.benchmark_group("pairwise_distances");
    let p = points(1024, 64, 1);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, 1024), |b| {
            b.iter(|| pool.install(|| pairwise_distances(black_box(&p))))
        });
    }
    group.finish();
}

fn bench_agd(c: &mut Criterion) {
    let mut group = c.benchmark_group("agd_bures");
    let samples: Vec<_> = (0..16).map(|s| sspd(&points(64, 48, 10 + s), 1e-5, Mode::Feature).unwrap()).collect();
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, 16), |b| {
            b.iter(|| pool.install(|| agd(black_box(&samples), AgdMetric::Bures).unwrap()))
        });
    }
    group.finish();
}

fn bench_gw(c: &mut Criterion) {
    let mut group = c.benchmark_group("gw_distance");
    group.sample_size(10);
    let a = normalized_distance_matrix(&points(128, 8, 2)).unwrap();
    let b = normalized_distance_matrix(&points(128, 8, 3)).unwrap();
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, 128), |bn| {
            bn.iter(|| pool.install(|| gw_distance(black_box(&a), black_box(&b)).unwrap()))
        });
    }
    group.finish();
}

fn bench_encode(c: &mut Criterion) {
    let mut group = c.benchmark_group("sae_encode");
    let (d, m) = (64, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w_enc = DMatrix::from_fn(m, d, |_, _| rng.random_range(-0.2f32..0.2));
    let w_dec = w_enc.transpose();
    let params = SaeParams::new(w_enc, DVector::zeros(m), w_dec, DVector::zeros(d), Nonlinearity::Relu).unwrap();
    let data = Tensor3::from_fn([16, 64, d], |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap();
    let x = ActivationTensor::unmasked(data);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, "16x64"), |b| {
            b.iter(|| pool.install(|| encode(black_box(&params), black_box(&x)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_pairwise, bench_agd, bench_gw, bench_encode);
criterion_main!(benches);
