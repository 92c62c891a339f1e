use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use cleftnet::autodiff::Graph;
use cleftnet::labels::{squared_distance_transform_with, UNIT_SPACING};
use cleftnet::par::Exec;
use cleftnet::tensor::{conv3d_with, ConvGeometry, Tensor};

fn policies() -> Vec<(&'static str, Exec)> {
    let mut v = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Exec::Parallel));
    v
}

fn wave(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let s: usize = i.iter().enumerate().map(|(a, &x)| (a + 3) * x).sum();
        ((s % 17) as f32 - 8.0) / 8.0
    })
    .unwrap()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    let x = wave(&[2, 8, 32, 32, 8]);
    let w = wave(&[3, 3, 3, 8, 8]);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::new(name, "2x8x32x32x8"), |b| {
            b.iter(|| conv3d_with(exec, black_box(&x), &w, ConvGeometry::same(3)).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    let (s, t, ck) = (2048, 512, 4);
    let k = wave(&[2, s, ck]);
    let v = wave(&[2, s, ck]);
    let q = wave(&[1, t, ck]);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::new(name, "fwd+bwd"), |b| {
            b.iter(|| {
                let mut g = Graph::with_exec(exec);
                let (kv, vv, qv) = (g.leaf(k.clone()), g.leaf(v.clone()), g.leaf(q.clone()));
                let z = g.attention(kv, vv, qv).unwrap();
                let l = g.sum(z);
                black_box(g.backward(l).unwrap());
            })
        });
    }
    group.finish();
}

fn edt(c: &mut Criterion) {
    let mut group = c.benchmark_group("edt");
    let mask = Tensor::from_fn(&[16, 64, 64], |i| (i[1] * 3 + i[2] + i[0]) % 23 > 2).unwrap();
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::new(name, "16x64x64"), |b| {
            b.iter(|| squared_distance_transform_with(exec, black_box(&mask), UNIT_SPACING).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, attention, edt
}
criterion_main!(benches);
