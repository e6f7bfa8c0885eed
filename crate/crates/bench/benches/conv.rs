use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use pac_bench::{conv_workload, module_fixture, CONV_SHAPES};
use pac_core::{pac_conv_backward, pac_conv_forward_with, pac_module_forward, ConvImpl, Tensor};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("pac_conv_forward");
    group.sample_size(10);
    for (shape, c_out) in CONV_SHAPES {
        let wl = conv_workload(shape, c_out);
        let [n, _, h, w] = shape;
        group.throughput(Throughput::Elements((n * c_out * h * w) as u64));
        let label = format!("{}x{}x{}x{}", shape[0], shape[1], h, w);
        for which in ConvImpl::ALL {
            group.bench_with_input(BenchmarkId::new(which.name(), &label), &wl, |b, wl| {
                b.iter(|| pac_conv_forward_with(which, black_box(&wl.input), &wl.params, &wl.offsets).unwrap())
            });
        }
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("pac_conv_backward");
    group.sample_size(10);
    let (shape, c_out) = CONV_SHAPES[1];
    let wl = conv_workload(shape, c_out);
    let [n, _, h, w] = shape;
    let grad = Tensor::from_fn(&[n, c_out, h, w], |i| ((i % 7) as f64 - 3.0) * 0.1);
    group.bench_function("1x16x64x64", |b| {
        b.iter(|| pac_conv_backward(black_box(&wl.input), &wl.params, &wl.offsets, &grad).unwrap())
    });
    group.finish();
}

fn module(c: &mut Criterion) {
    let mut group = c.benchmark_group("pac_module_forward");
    group.sample_size(10);
    let fx = module_fixture([1, 16, 64, 208]);
    group.bench_function("1x16x64x208", |b| {
        b.iter(|| pac_module_forward(black_box(&fx.input), &fx.params, &fx.config, &fx.angles).unwrap())
    });
    group.finish();
}

criterion_group!(benches, forward, backward, module);
criterion_main!(benches);
