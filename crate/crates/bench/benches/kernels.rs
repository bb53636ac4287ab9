use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use points2pix::geometry::{project_points, CameraModel, PointCloud};
use points2pix::tensor::{ConvGeom, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_4x4_s2");
    for (cin, size) in [(3usize, 64usize), (32, 32), (64, 16)] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.insert("x", random(&mut rng, &[1, cin, size, size]));
        s.insert("w", random(&mut rng, &[2 * cin, cin, 4, 4]));
        let id = format!("{cin}ch_{size}px");
        g.bench_with_input(BenchmarkId::new("forward", &id), &s, |b, s| {
            b.iter(|| {
                let mut t = Tape::new(0);
                let (x, w) = (t.param(s, "x").unwrap(), t.param(s, "w").unwrap());
                black_box(t.conv2d(x, w, None, ConvGeom::new(2, 1)).unwrap());
            })
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", &id), &s, |b, s| {
            b.iter(|| {
                let mut t = Tape::new(0);
                let (x, w) = (t.param(s, "x").unwrap(), t.param(s, "w").unwrap());
                let y = t.conv2d(x, w, None, ConvGeom::new(2, 1)).unwrap();
                let l = t.sum(y).unwrap();
                black_box(t.backward(l).unwrap());
            })
        });
    }
    g.finish();
}

fn projection(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<[f64; 3]> = (0..100_000)
        .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-5.0..5.0), rng.random_range(-60.0..-1.0)])
        .collect();
    let cloud = PointCloud::from_points(pts).unwrap();
    let cam = CameraModel::new(90.0, 0.5, 80.0, 1242, 375).unwrap();
    c.bench_function("project_100k_points", |b| b.iter(|| black_box(project_points(&cloud, &cam).unwrap())));
}

criterion_group!(benches, conv, projection);
criterion_main!(benches);
