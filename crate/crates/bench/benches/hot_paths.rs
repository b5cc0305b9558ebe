//! Microbenchmarks for the operations that dominate training and sampling
//! time: dense matmul, convolution, a short DDIM sampling run, and caption
//! tokenization.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tinv_core::diffusion::GuidanceConfig;
use tinv_core::model::FrozenModel;
use tinv_core::rng;
use tinv_core::text::Vocabulary;
use tinv_core::Tensor;

fn bench_matmul(c: &mut Criterion) {
    let mut r = rng::stream(0, "bench-matmul", 0);
    let a = Tensor::randn(&[64, 256], &mut r);
    let b = Tensor::randn(&[256, 256], &mut r);
    c.bench_function("matmul_64x256_by_256x256", |bch| {
        bch.iter(|| black_box(&a).matmul(black_box(&b)).unwrap());
    });
}

fn bench_conv2d(c: &mut Criterion) {
    let mut r = rng::stream(0, "bench-conv", 0);
    let x = Tensor::randn(&[4, 16, 16, 16], &mut r);
    let w = Tensor::randn(&[32, 16, 3, 3], &mut r);
    let bias = Tensor::randn(&[32], &mut r);
    c.bench_function("conv2d_b4_16to32_16x16_k3", |bch| {
        bch.iter(|| {
            black_box(&x)
                .conv2d(black_box(&w), Some(&bias), 1, 1)
                .unwrap()
        });
    });
}

fn bench_ddim_sampling(c: &mut Criterion) {
    let model = FrozenModel::new(0, false);
    let guidance = GuidanceConfig::none();
    c.bench_function("ddim_sample_1_image_10_steps", |bch| {
        bch.iter(|| {
            model
                .sample_latents_with(
                    None,
                    1,
                    black_box("a photo of a red circle."),
                    10,
                    &guidance,
                    0,
                )
                .unwrap()
        });
    });
}

fn bench_tokenize(c: &mut Criterion) {
    let vocab = Vocabulary::standard();
    let caption = "a dark photo of a small striped blue triangle in the lower left.";
    c.bench_function("tokenize_caption", |bch| {
        bch.iter(|| vocab.tokenize(black_box(caption)));
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_conv2d,
    bench_ddim_sampling,
    bench_tokenize
);
criterion_main!(benches);
