use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use epk_core::data::{gen_blobs, BlobSpec};
use epk_core::kernel::{Method, PathKernel, Quadrature};
use epk_core::nn::{forward_with_jacobian, ModelSpec};
use epk_core::{LabeledDataset, StepSchedule, TrainConfig, Trajectory};

fn setup() -> (LabeledDataset, Trajectory) {
    let data = gen_blobs(&BlobSpec {
        per_class_count: 100,
        ..BlobSpec::toy(0)
    })
    .unwrap();
    let traj = TrainConfig {
        model: ModelSpec::mlp(&[100, 8, 3]),
        lr: StepSchedule::Constant(0.04),
        steps: 20,
        seed: 0,
        loss: Default::default(),
    }
    .train(&data)
    .unwrap();
    (data, traj)
}

fn benches(c: &mut Criterion) {
    let (data, traj) = setup();
    let pk = PathKernel::new(&traj, &data).unwrap();
    let x = data.x(7).to_vec();

    c.bench_function("jacobian 100-8-3", |b| {
        b.iter(|| forward_with_jacobian(&traj.spec, &traj.checkpoints[5], black_box(&x)).unwrap())
    });
    c.bench_function("epk predict M=300 N=20 T=10", |b| {
        b.iter(|| pk.predict(&[black_box(&x[..])], Method::Epk(Quadrature::left(10))).unwrap())
    });
    let pts: Vec<&[f64]> = (0..10).map(|i| data.x(i * 30)).collect();
    c.bench_function("gram 10 points N=20 T=4", |b| {
        b.iter(|| pk.symmetric_gram(black_box(&pts), &pts, Quadrature::left(4)).unwrap())
    });
}

criterion_group! {
    name = kernel;
    config = Criterion::default().sample_size(10);
    targets = benches
}
criterion_main!(kernel);
