use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use points2pix::dataio::{synthetic_samples, CropConfig, RandomSceneConfig};
use points2pix::training::{prepare_dataset, Batch, Preset, TrainConfig, TrainState};

fn toy_batch() -> (TrainState<f32>, Batch<f32>) {
    let cfg = TrainConfig::preset(Preset::Toy64);
    let crop = CropConfig {
        patch_size: 64,
        ..CropConfig::default()
    };
    let samples = synthetic_samples(0, 1, &RandomSceneConfig::default(), &crop).unwrap();
    let state = TrainState::<f32>::new(cfg.clone()).unwrap();
    let data = prepare_dataset(&samples, &cfg.data, state.streams()).unwrap();
    let batch = Batch::collate(&[&data[0]]).unwrap();
    (state, batch)
}

fn toy(c: &mut Criterion) {
    let (state, batch) = toy_batch();
    c.bench_function("toy_generate", |b| {
        b.iter(|| black_box(state.generate(&batch.condition, &batch.points, 1).unwrap()))
    });
    let mut g = c.benchmark_group("toy_train");
    g.sample_size(10);
    g.bench_function("train_step", |b| {
        let mut s = state.clone();
        b.iter(|| black_box(s.train_step(&batch).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, toy);
criterion_main!(benches);
