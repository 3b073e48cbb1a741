use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use keyfield::dataio::{generate_synthetic, preset, ShapeKind, SyntheticShapeSpec};
use keyfield::evalsuite::relative_repeatability;
use keyfield::field_model::Heads;
use keyfield::geometry::{nms, random_se3};
use keyfield::inference::{canonical_lattice, extract_keypoints, marching_cubes, Lattice};
use keyfield::trainer::{make_training_pair, train_step, TrainState};
use keyfield::{FieldModel, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect()
}

fn geometry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cands = points(&mut rng, 2000);
    let scores: Vec<f64> = cands.iter().map(|_| rng.random()).collect();
    c.bench_function("nms_2000", |b| b.iter(|| nms(black_box(&cands), &scores, 0.05).unwrap()));

    let a = points(&mut rng, 500);
    let t = random_se3(&mut rng, 3.0, 0.1).unwrap();
    let moved: Vec<Vec3> = a.iter().map(|p| t.apply(p)).collect();
    c.bench_function("repeatability_500", |b| {
        b.iter(|| relative_repeatability(black_box(&a), &moved, &t, 0.04).unwrap())
    });

    let n = 48;
    let lattice = canonical_lattice([n; 3]);
    let values: Vec<f64> = lattice.iter().map(|p| p.norm() - 0.35).collect();
    let grid = Lattice {
        values: &values,
        dims: [n; 3],
        origin: Vec3::repeat(-0.5),
        spacing: Vec3::repeat(1.0 / (n - 1) as f64),
    };
    c.bench_function("marching_cubes_48", |b| b.iter(|| marching_cubes(black_box(&grid), 0.0)));
}

fn model(c: &mut Criterion) {
    let cfg = preset("lite-overfit").unwrap();
    let shape = generate_synthetic(&SyntheticShapeSpec {
        kind: ShapeKind::Box { size: [0.5, 0.4, 0.3] },
        n_points: 2048,
        seed: 0,
    })
    .unwrap();
    let m = FieldModel::new(cfg.model.clone(), 0).unwrap();
    c.bench_function("encode_lite_2048", |b| b.iter(|| m.encode(black_box(&shape.cloud)).unwrap()));

    let volume = m.encode(&shape.cloud).unwrap();
    let queries = canonical_lattice([16; 3]);
    c.bench_function("query_4096", |b| {
        b.iter(|| m.query_volume(&volume, black_box(&queries), Heads::BOTH).unwrap())
    });

    let mut params = cfg.extract;
    params.thr_s = 0.01;
    let mut group = c.benchmark_group("slow");
    group.sample_size(10);
    group.bench_function("extract_lite", |b| b.iter(|| extract_keypoints(&m, &shape.cloud, &params).unwrap()));

    let mut state = TrainState::new(cfg.model.clone(), &cfg.train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let item = make_training_pair(&shape.cloud, &cfg.train, &mut rng).unwrap();
    group.bench_function("train_step_lite", |b| {
        b.iter(|| train_step(&mut state, std::slice::from_ref(&item), &cfg.train).unwrap())
    });
    group.finish();
}

criterion_group!(benches, geometry, model);
criterion_main!(benches);
