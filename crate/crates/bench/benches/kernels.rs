use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use malaria_bench::{auc_case, conv_case, svm_case};
use malaria_core::eval::roc_auc;
use malaria_core::layers::conv2d;
use malaria_core::svm::{smo_train, SvmParams};
use std::hint::black_box;

fn conv_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_forward");
    for (c_in, c_out, side) in [(3, 32, 64), (32, 64, 50), (64, 128, 25)] {
        let (x, w, b) = conv_case(8, c_in, c_out, side);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{c_in}x{c_out}@{side}")), &(), |bench, _| {
            bench.iter(|| conv2d(black_box(&x), black_box(&w), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn smo(c: &mut Criterion) {
    let mut g = c.benchmark_group("smo_train");
    g.sample_size(10);
    for n in [200, 1000] {
        let x = svm_case(n, 64);
        g.bench_with_input(BenchmarkId::from_parameter(n), &x, |bench, x| {
            bench.iter(|| smo_train(black_box(x), &SvmParams::default()).unwrap())
        });
    }
    g.finish();
}

fn auc(c: &mut Criterion) {
    let recs = auc_case(100_000);
    c.bench_function("roc_auc_100k", |bench| bench.iter(|| roc_auc(black_box(&recs)).unwrap()));
}

criterion_group!(kernels, conv_forward, smo, auc);
criterion_main!(kernels);
