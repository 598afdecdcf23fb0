//! Hot kernels: correlation volume, convolution, pose accumulation,
//! compounding, baseline step estimation and one toy training forward pass.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sonotrack::baseline::{estimate_step, BaselineParams, DecorrModel};
use sonotrack::compound::compound;
use sonotrack::correlation::{correlate, CorrConfig};
use sonotrack::network::{frames_tensor, Model, ModelConfig};
use sonotrack::pose::{accumulate_poses, ImageGeometry, PoseVector};
use sonotrack::tensor::gradcheck::random_tensor;
use sonotrack::tensor::Tape;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn random_frames(n: usize, geom: &ImageGeometry, r: &mut impl Rng) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..geom.rows * geom.cols).map(|_| r.random::<f32>()).collect())
        .collect()
}

fn bench_correlate(c: &mut Criterion) {
    let mut r = rng();
    let a = random_tensor(&[16, 64, 64], &mut r);
    let b = random_tensor(&[16, 64, 64], &mut r);
    let cfg = CorrConfig::default();
    c.bench_function("correlate 16x64x64 ncc", |bch| {
        bch.iter(|| correlate(black_box(&a), black_box(&b), &cfg).unwrap())
    });
}

fn bench_conv2d(c: &mut Criterion) {
    let mut r = rng();
    let x = random_tensor(&[4, 16, 32, 32], &mut r);
    let w = random_tensor(&[32, 16, 3, 3], &mut r);
    let bias = random_tensor(&[32], &mut r);
    c.bench_function("conv2d 4x16x32x32 -> 32, forward+backward", |bch| {
        bch.iter(|| {
            let tape = Tape::new();
            let (x, w, b) = (
                tape.leaf(x.clone()),
                tape.leaf(w.clone()),
                tape.leaf(bias.clone()),
            );
            let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
            tape.backward(y.sum()).unwrap();
        })
    });
}

fn bench_accumulate(c: &mut Criterion) {
    let mut r = rng();
    let rel: Vec<PoseVector> = (0..10_000)
        .map(|_| PoseVector::from_array(std::array::from_fn(|_| r.random_range(-0.5..0.5))))
        .collect();
    c.bench_function("accumulate 10k poses", |bch| {
        bch.iter(|| accumulate_poses(black_box(&rel)).unwrap())
    });
}

fn bench_compound(c: &mut Criterion) {
    let mut r = rng();
    let geom = ImageGeometry::square(128, ImageGeometry::DEFAULT_PITCH_MM).unwrap();
    let frames = random_frames(50, &geom, &mut r);
    let rel = vec![PoseVector::new(0.0, 0.01, 0.2, 0.1, 0.2, 0.0); 49];
    let traj = accumulate_poses(&rel).unwrap();
    c.bench_function("compound 50 frames 128x128", |bch| {
        bch.iter(|| compound(black_box(&frames), &geom, &traj, 0.2).unwrap())
    });
}

fn bench_baseline_step(c: &mut Criterion) {
    let mut r = rng();
    let geom = ImageGeometry::square(128, ImageGeometry::DEFAULT_PITCH_MM).unwrap();
    let frames = random_frames(2, &geom, &mut r);
    let model = DecorrModel::from_table(
        vec![(1.0, 0.0), (0.5, 0.25), (0.1, 0.5)],
        BaselineParams::default(),
    )
    .unwrap();
    c.bench_function("baseline step 128x128", |bch| {
        bch.iter(|| estimate_step(&frames[0], &frames[1], &geom, &model).unwrap())
    });
}

fn bench_toy_forward(c: &mut Criterion) {
    let model = Model::new(ModelConfig::toy(), 0).unwrap();
    let geom = ImageGeometry::square(64, ImageGeometry::DEFAULT_PITCH_MM).unwrap();
    let frames = random_frames(10, &geom, &mut rng());
    let refs: Vec<&[f32]> = frames.iter().map(Vec::as_slice).collect();
    let x = frames_tensor(&refs, 64)
        .unwrap()
        .reshaped(&[1, 10, 64, 64])
        .unwrap();
    let mut group = c.benchmark_group("toy model");
    group.sample_size(10);
    group.bench_function("forward+backward, 1 window of 10 frames", |bch| {
        bch.iter(|| {
            let tape = Tape::new();
            let p = model.store.bind(&tape);
            let out = model.forward(&p, &tape, &x).unwrap();
            tape.backward(out.fused.sum()).unwrap();
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_correlate,
    bench_conv2d,
    bench_accumulate,
    bench_compound,
    bench_baseline_step,
    bench_toy_forward
);
criterion_main!(benches);
