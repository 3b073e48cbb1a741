use std::path::Path;
use std::process::{Command, Output};

fn keyfield(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keyfield"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn keyfield")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = keyfield(dir, args);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "{args:?} failed: {err}");
    err
}

/// A box cloud and a few training steps of the smallest preset.
fn trained(dir: &Path, seed: &str) {
    ok(dir, &["synth", "--kind", "box", "--n", "600", "--seed", seed]);
    ok(
        dir,
        &["train", "--preset", "lite-smoke", "--seed", seed, "--set", "train.iters_per_epoch=2", "--set", "train.n_points=600"],
    );
}

#[test]
fn unknown_flag_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = keyfield(dir.path(), &["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("--bogus"));
}

#[test]
fn failures_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = keyfield(dir.path(), &["extract", "--checkpoint", "missing.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let last = err.trim_end().lines().last().unwrap();
    assert!(last.starts_with("error: ") && last.contains("missing.ckpt"), "{err}");

    let out = keyfield(dir.path(), &["train", "--preset", "lite-smoke", "--set", "train.nope=1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.trim_end().lines().last().unwrap().contains("nope"), "{err}");

    let out = keyfield(dir.path(), &["train", "--preset", "nonesuch"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_writes_cloud_and_corners() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--kind", "box", "--n", "300", "--out", "b.ply"]);
    let cloud = keyfield::dataio::load_cloud(dir.path().join("b.ply")).unwrap();
    assert_eq!(cloud.len(), 300);
    let corners = keyfield::dataio::load_cloud(dir.path().join("b.corners.xyz")).unwrap();
    assert_eq!(corners.len(), 8);
}

#[test]
fn pipeline_produces_keypoints_mesh_and_slice() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "box", "--n", "2048"]);
    let log = ok(d, &["train", "--preset", "lite-overfit", "--set", "train.iters_per_epoch=1"]);
    assert!(log.contains("# resolved config"));
    assert!(d.join("run/epoch_0001.ckpt").exists());
    assert!(d.join("run/config.toml").exists());
    ok(d, &["extract", "--set", "extract.thr_s=0.01"]);
    let text = std::fs::read_to_string(d.join("keypoints.txt")).unwrap();
    assert!(text.starts_with("# keypoints="));
    for line in text.lines().skip(1) {
        assert_eq!(line.split_whitespace().count(), 4);
    }
    ok(d, &["reconstruct", "--resolution", "16", "--iso", "0.4"]);
    assert!(d.join("mesh.ply").exists());
    ok(d, &["slice", "--resolution", "9", "--out", "s.pgm"]);
    assert!(std::fs::read(d.join("s.pgm")).unwrap().starts_with(b"P"));
}

#[test]
fn seed_determines_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    trained(a.path(), "7");
    trained(b.path(), "7");
    for f in ["synth.ply", "run/epoch_0001.ckpt", "run/train_log.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    ok(a.path(), &["extract", "--seed", "3"]);
    ok(b.path(), &["extract", "--seed", "3"]);
    assert_eq!(
        std::fs::read(a.path().join("keypoints.txt")).unwrap(),
        std::fs::read(b.path().join("keypoints.txt")).unwrap()
    );
}

#[test]
fn resume_continues_to_the_schedule_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "sphere", "--n", "600"]);
    ok(d, &["train", "--preset", "lite-smoke", "--epochs", "1", "--set", "train.iters_per_epoch=1", "--set", "train.n_points=600"]);
    assert!(d.join("run/epoch_0000.ckpt").exists());
    assert!(!d.join("run/epoch_0001.ckpt").exists());
    ok(d, &["train", "--resume", "run"]);
    assert!(d.join("run/epoch_0001.ckpt").exists());
}

#[test]
fn noise_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, "1");
    ok(
        d,
        &["eval-repeat", "--sweep", "noise", "--sigmas", "0,0.02,0.04,0.06", "--views", "2", "--set", "extract.thr_s=0.01", "--out", "noise.csv"],
    );
    let csv = std::fs::read_to_string(d.join("noise.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "view,noise,repeatability");
    let means: Vec<&str> = csv.lines().filter(|l| l.starts_with("mean,")).collect();
    assert_eq!(means.len(), 4);
    assert!(csv.lines().last().unwrap().starts_with("# monotone="));
}

#[test]
fn manifest_evaluations_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, "2");
    ok(d, &["synth", "--kind", "two-box", "--n", "500", "--out", "a.ply"]);
    // The partner is the same cloud, so the identity transform is exact.
    std::fs::write(
        d.join("pairs.txt"),
        "test a.ply partner=a.ply transform=1,0,0,0,0,1,0,0,0,0,1,0\n\
         test synth.ply annotation=synth.corners.xyz\n",
    )
    .unwrap();
    ok(d, &["eval-register", "--manifest", "pairs.txt", "--set", "extract.thr_s=0.01", "--set", "eval.n_keypoints=16"]);
    let csv = std::fs::read_to_string(d.join("registration.csv")).unwrap();
    assert!(csv.contains("# summary fmr="));
    ok(d, &["eval-semantic", "--manifest", "pairs.txt", "--set", "extract.thr_s=0.01"]);
    let csv = std::fs::read_to_string(d.join("semantic.csv")).unwrap();
    assert!(csv.starts_with("threshold,miou\n"));
    assert!(csv.contains("# instances=1"));
    ok(d, &["eval-semantic", "--manifest", "pairs.txt", "--protocol", "pairwise", "--set", "extract.thr_s=0.01", "--out", "pw.csv"]);
    assert!(std::fs::read_to_string(d.join("pw.csv")).unwrap().contains("# instances=1"));
}
