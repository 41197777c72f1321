use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use cmsc_core::imaging::{bicubic_resize, ColorSpace, ImagePlane};
use cmsc_core::metrics::ssim;
use cmsc_core::numerics::{conv2d, conv2d_backward, Conv2dParams};
use cmsc_core::{CmscModel, Mode, ModelConfig, Shape, Tensor};

fn ramp(shape: Shape) -> Tensor {
    let data = (0..shape.len()).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn plane(w: usize, h: usize, phase: usize) -> ImagePlane {
    let v = (0..w * h).map(|i| ((i * 31 + phase) % 256) as f64 / 255.0).collect();
    ImagePlane::new(w, h, v, ColorSpace::Y).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for k in [3, 5] {
        let x = ramp(Shape::new(4, 16, 32, 32));
        let mut p = Conv2dParams::zeros(16, 16, k).unwrap();
        p.weight = ramp(p.weight.shape());
        let g = ramp(Shape::new(4, 16, 32, 32));
        group.bench_with_input(BenchmarkId::new("forward", k), &k, |b, _| b.iter(|| conv2d(black_box(&x), &p).unwrap()));
        group.bench_with_input(BenchmarkId::new("backward", k), &k, |b, _| {
            b.iter(|| conv2d_backward(black_box(&x), &p, &g).unwrap())
        });
    }
    group.finish();
}

fn resize(c: &mut Criterion) {
    let img = plane(128, 128, 0);
    let mut group = c.benchmark_group("bicubic_resize");
    group.bench_function("up_x3", |b| b.iter(|| bicubic_resize(black_box(&img), 384, 384, true).unwrap()));
    group.bench_function("down_x3", |b| b.iter(|| bicubic_resize(black_box(&img), 43, 43, true).unwrap()));
    group.finish();
}

fn structural(c: &mut Criterion) {
    let (a, b) = (plane(256, 256, 0), plane(256, 256, 5));
    c.bench_function("ssim_256", |bench| bench.iter(|| ssim(black_box(&a), black_box(&b)).unwrap()));
}

fn model_step(c: &mut Criterion) {
    let cfg = ModelConfig {
        stages: 2,
        modules_per_stage: 2,
        channels: 8,
        ..ModelConfig::default()
    };
    let model = CmscModel::initialized(cfg, 1).unwrap();
    let x = ramp(Shape::new(2, 1, 24, 24));
    c.bench_function("model_forward_backward", |b| {
        b.iter(|| {
            let fwd = model.forward(black_box(&x), Mode::Train).unwrap();
            let zeros = vec![Tensor::zeros(x.shape()); fwd.intermediates.len()];
            model.backward(fwd.cache.as_ref().unwrap(), &fwd.output, &zeros).unwrap()
        })
    });
}

criterion_group!(benches, conv, resize, structural, model_step);
criterion_main!(benches);
