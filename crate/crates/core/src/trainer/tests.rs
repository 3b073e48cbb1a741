use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Vec3;
use crate::dataio::{generate_synthetic, load_checkpoint, preset, ShapeKind, SyntheticShapeSpec};
use crate::losses::repeatability_from_saliency;

fn sphere(n: usize) -> PointCloud {
    generate_synthetic(&SyntheticShapeSpec {
        kind: ShapeKind::Sphere { radius: 0.35 },
        n_points: n,
        seed: 1,
    })
    .unwrap()
    .cloud
}

#[test]
fn schedule_examples() {
    let kp = preset("keypointnet").unwrap().train;
    assert_eq!(lr_schedule(39, &kp).unwrap(), 1e-4);
    assert_eq!(lr_schedule(40, &kp).unwrap(), 1e-5);
    assert!(lr_schedule(60, &kp).is_err());
    let short = TrainConfig {
        epochs_first: 1,
        epochs_total: 2,
        ..TrainConfig::default()
    };
    assert_eq!(lr_schedule(0, &short).unwrap(), 1e-4);
    let m = preset("3dmatch").unwrap().train;
    assert_eq!(lr_schedule(17, &m).unwrap(), 1e-5);
}

#[test]
fn validation() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    for bad in [
        TrainConfig { epochs_first: 0, ..ok.clone() },
        TrainConfig { epochs_first: 60, ..ok.clone() },
        TrainConfig { thr_o: 0.6, ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { occupancy_warmup: 60, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn disabled_augmentation_copies_the_cloud() {
    let cfg = TrainConfig {
        n_points: 300,
        n_grids: 5,
        n_pos: 50,
        n_neg: 50,
        aug: AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    let cloud = sphere(300);
    let item = make_training_pair(&cloud, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(item.transform, RigidTransform::identity());
    assert_eq!(item.tp, item.p);
    assert_eq!(item.p, cloud);
}

#[test]
fn modelnet_row_shapes() {
    let cfg = preset("modelnet40").unwrap().train;
    let cloud = sphere(6000);
    let item = make_training_pair(&cloud, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(item.p.len(), 5000);
    assert_eq!(item.grids.len(), 500);
    for g in &item.grids {
        assert!((g.extent - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(g.len(), 512);
        assert!(item.p.points().contains(&g.center));
    }
    assert!(item.tp.len() <= 5000 && item.tp.len() >= 1250);
}

#[test]
fn seeded_pairs_repeat() {
    let cfg = preset("lite-smoke").unwrap().train;
    let cloud = sphere(700);
    let a = make_training_pair(&cloud, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = make_training_pair(&cloud, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn transport_consistent_saliency_has_zero_repeatability() {
    let cfg = TrainConfig {
        n_points: 400,
        n_grids: 20,
        n_pos: 10,
        n_neg: 10,
        ..TrainConfig::default()
    };
    let cloud = sphere(400);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let item = make_training_pair(&cloud, &cfg, &mut rng).unwrap();
        let inv = item.transform.inverse();
        let g = |p: &Vec3| 0.5 + 0.4 * (7.0 * p.x).sin() * (5.0 * p.y + p.z).cos();
        let first: Vec<Vec<f64>> = item.grids.iter().map(|gr| gr.points.iter().map(g).collect()).collect();
        let second: Vec<Vec<f64>> = item
            .grids
            .iter()
            .map(|gr| gr.points.iter().map(|q| g(&inv.apply(&item.transform.apply(q)))).collect())
            .collect();
        assert!(repeatability_from_saliency(&first, &second).unwrap() < 1e-7);
        let margin = 0.5 * 3f64.sqrt() + cfg.aug.max_translation + 1.0 / cfg.grid_scale;
        for gr in &item.grids {
            for q in &gr.points {
                assert!(item.transform.apply(q).norm() <= margin + 1e-12);
            }
        }
    }
}

fn smoke_setup() -> (Config, PointCloud) {
    (preset("lite-smoke").unwrap(), sphere(512))
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (mut cfg, cloud) = smoke_setup();
    cfg.train.lr = 0.0;
    let mut state = TrainState::new(cfg.model.clone(), &cfg.train).unwrap();
    let before = state.model.params().to_vec();
    let item = make_training_pair(&cloud, &cfg.train, &mut state.rng).unwrap();
    let report = train_step(&mut state, &[item], &cfg.train).unwrap();
    assert!(report.total.is_finite() && report.total > 0.0);
    assert_eq!(state.model.params(), before.as_slice());
    assert_eq!(state.step, 1);
}

#[test]
fn worker_count_does_not_change_results() {
    let (mut cfg, cloud) = smoke_setup();
    let run = |workers: usize, cfg: &mut Config| {
        cfg.train.workers = workers;
        let mut state = TrainState::new(cfg.model.clone(), &cfg.train).unwrap();
        let items: Vec<_> = (0..3)
            .map(|_| make_training_pair(&cloud, &cfg.train, &mut state.rng).unwrap())
            .collect();
        train_step(&mut state, &items, &cfg.train).unwrap();
        state
    };
    let a = run(1, &mut cfg);
    let b = run(3, &mut cfg);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn warmup_trains_occupancy_alone() {
    let (mut cfg, cloud) = smoke_setup();
    let step = |train: &TrainConfig| {
        let mut state = TrainState::new(cfg.model.clone(), train).unwrap();
        let item = make_training_pair(&cloud, train, &mut state.rng).unwrap();
        let report = train_step(&mut state, &[item], train).unwrap();
        (state, report)
    };
    let full = step(&cfg.train);
    cfg.train.occupancy_warmup = 1;
    let warm = step(&cfg.train);
    let mut only_o = cfg.train.clone();
    only_o.occupancy_warmup = 0;
    only_o.loss_weights = LossWeights { o: 1.0, r: 0.0, m: 0.0, s: 0.0 };
    let reference = step(&only_o);
    assert_eq!(warm.0.model.params(), reference.0.model.params());
    assert_eq!(warm.1.total, warm.1.l_o);
    assert_ne!(warm.0.model.params(), full.0.model.params());
    assert_eq!(cfg.train.loss_options_at(1).weights, LossWeights::default());
}

#[test]
fn sphere_occupancy_loss_halves() {
    let (mut cfg, cloud) = smoke_setup();
    cfg.train.lr = 3e-3;
    let mut state = TrainState::new(cfg.model.clone(), &cfg.train).unwrap();
    let mut first = None;
    let mut last = Vec::new();
    for step in 0..200 {
        let item = make_training_pair(&cloud, &cfg.train, &mut state.rng).unwrap();
        let r = train_step(&mut state, &[item], &cfg.train).unwrap();
        if step == 0 {
            first = Some(r.l_o);
        }
        if step >= 190 {
            last.push(r.l_o);
        }
    }
    let end = last.iter().sum::<f64>() / last.len() as f64;
    assert!(end <= 0.5 * first.unwrap(), "{} -> {end}", first.unwrap());
}

#[test]
fn fit_writes_a_checkpoint_per_epoch() {
    let (mut cfg, cloud) = smoke_setup();
    cfg.train.epochs_first = 3;
    cfg.train.epochs_total = 5;
    cfg.train.iters_per_epoch = 2;
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        max_epochs: None,
    };
    let report = fit(&[cloud.clone()], &cfg, None, &opts, &mut |l| lines.push(l.to_string())).unwrap();
    assert_eq!(report.checkpoints.len(), 5);
    assert!(report.checkpoints.iter().all(|p| p.exists()));
    assert_eq!(lines.len(), 10);
    assert!(lines[0].starts_with("epoch=0 step=1 l_o="));
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert_eq!(report.state.history.len(), 5);

    let again = fit(&[cloud], &cfg, None, &FitOptions::default(), &mut |_| {}).unwrap();
    assert_eq!(again.state.history, report.state.history);
    let last = load_checkpoint(report.checkpoints.last().unwrap()).unwrap();
    assert_eq!(last.into_state().unwrap(), report.state);
}

#[test]
fn resumed_fit_matches_uninterrupted() {
    let (mut cfg, cloud) = smoke_setup();
    cfg.train.epochs_first = 2;
    cfg.train.epochs_total = 4;
    cfg.train.iters_per_epoch = 2;
    let data = [cloud];
    let full = fit(&data, &cfg, None, &FitOptions::default(), &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        max_epochs: Some(2),
    };
    let half = fit(&data, &cfg, None, &opts, &mut |_| {}).unwrap();
    assert_eq!(half.state.epoch, 2);
    let resumed_from = load_checkpoint(&half.checkpoints[1]).unwrap().into_state().unwrap();
    let rest = fit(&data, &cfg, Some(resumed_from), &FitOptions::default(), &mut |_| {}).unwrap();
    assert_eq!(rest.state, full.state);
}

#[test]
fn empty_dataset_and_batch_are_rejected() {
    let (cfg, _) = smoke_setup();
    assert!(fit(&[], &cfg, None, &FitOptions::default(), &mut |_| {}).is_err());
    let mut state = TrainState::new(cfg.model.clone(), &cfg.train).unwrap();
    assert!(train_step(&mut state, &[], &cfg.train).is_err());
}
