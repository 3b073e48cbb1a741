use std::path::{Path, PathBuf};

use keyfield::dataio::{
    generate_synthetic, load_checkpoint, load_cloud, preset, save_checkpoint, save_mesh_ply, save_ply, save_xyz,
    write_atomic, Checkpoint, Config, DatasetManifest, PlyFormat, ShapeKind, Split, SyntheticShapeSpec,
};
use keyfield::evalsuite::{
    geodesic_between, registration_metrics, repeatability_sweep, semantic_miou_annotated, semantic_miou_pairwise,
    AnnotatedInstance, Correspondence, Descriptor, HistogramDescriptor, PairedInstance, RandomDescriptor,
    RegistrationPair, Sweep,
};
use keyfield::geometry::{denormalize, normalize_cloud};
use keyfield::inference::{extract_keypoints, field_slice, reconstruct_surface};
use keyfield::trainer::{fit, FitOptions};
use keyfield::{Error, ExtractParams, FieldModel, KeypointSet, NormParams, PointCloud, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Command, Common, DescriptorKind, ModelInput, Protocol, SweepKind};

/// Config from `--config` or `--preset`, or `fallback` when neither is
/// given, then the overrides.
fn resolve(common: &Common, fallback: impl FnOnce() -> Result<Config>) -> Result<Config> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), None) => Config::load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => fallback()?,
        (Some(_), Some(_)) => return Err(Error::Config("give --config or --preset, not both".into())),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.train.workers = w;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_config(cfg: &Config) {
    eprintln!("# resolved config");
    for line in cfg.to_toml_string().lines() {
        eprintln!("#   {line}");
    }
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn eval_rng(common: &Common) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0))
}

/// The file itself, or the latest `epoch_NNNN.ckpt` in a directory.
fn find_checkpoint(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt"))
        })
        .collect();
    found.sort();
    found
        .pop()
        .ok_or_else(|| Error::invalid("checkpoint", format!("no epoch_*.ckpt in {}", path.display())))
}

/// Model weights from the checkpoint; settings from the flags, or from the
/// checkpoint's own config when none are given.
fn load_model(common: &Common, checkpoint: &Path) -> Result<(FieldModel, Config)> {
    let ck = load_checkpoint(find_checkpoint(checkpoint)?)?;
    let mut cfg = resolve(common, || Ok(ck.config.clone()))?;
    cfg.model = ck.config.model.clone();
    Ok((ck.model()?, cfg))
}

fn load_normalized(path: &Path) -> Result<(PointCloud, NormParams)> {
    normalize_cloud(&load_cloud(path)?)
}

/// Extraction with raw-unit radii converted for this cloud.
fn extract(model: &FieldModel, cloud: &PointCloud, norm: &NormParams, params: &ExtractParams) -> Result<KeypointSet> {
    let p = ExtractParams {
        nms_radius: params.canonical_nms_radius(norm),
        raw_units: false,
        ..*params
    };
    extract_keypoints(model, cloud, &p)
}

pub fn run(common: &Common, command: &Command) -> Result<()> {
    match command {
        Command::Synth { kind, n } => synth(common, kind, *n),
        Command::Train {
            input,
            manifest,
            resume,
            epochs,
        } => train(common, input, manifest.as_deref(), resume.as_deref(), *epochs),
        Command::Extract { model } => run_extract(common, model),
        Command::Reconstruct { model, iso, resolution } => reconstruct(common, model, *iso, *resolution),
        Command::Slice {
            model,
            field,
            axis,
            mode,
            resolution,
        } => slice(common, model, field, axis, mode, *resolution),
        Command::EvalRepeat {
            model,
            sweep,
            values,
            views,
            max_rotation_deg,
            max_translation,
        } => eval_repeat(common, model, *sweep, values, *views, *max_rotation_deg, *max_translation),
        Command::EvalSemantic {
            checkpoint,
            manifest,
            protocol,
        } => eval_semantic(common, checkpoint, manifest, *protocol),
        Command::EvalRegister {
            checkpoint,
            manifest,
            descriptor,
            descriptor_radius,
        } => eval_register(common, checkpoint, manifest, *descriptor, *descriptor_radius),
    }
}

fn synth(common: &Common, kind: &str, n: usize) -> Result<()> {
    let kind: ShapeKind = kind.parse()?;
    let shape = generate_synthetic(&SyntheticShapeSpec {
        kind,
        n_points: n,
        seed: common.seed.unwrap_or(0),
    })?;
    let out = out_path(common, "synth.ply");
    save_ply(&out, shape.cloud.points(), PlyFormat::Ascii)?;
    if !shape.corners.is_empty() {
        save_xyz(out.with_extension("corners.xyz"), &shape.corners)?;
    }
    eprintln!("wrote {} points to {}", shape.cloud.len(), out.display());
    Ok(())
}

fn train(
    common: &Common,
    input: &[PathBuf],
    manifest: Option<&Path>,
    resume: Option<&Path>,
    epochs: Option<usize>,
) -> Result<()> {
    let (cfg, state) = match resume {
        Some(path) => {
            let ck = load_checkpoint(find_checkpoint(path)?)?;
            let mut cfg = resolve(common, || Ok(ck.config.clone()))?;
            cfg.model = ck.config.model.clone();
            (cfg, Some(ck.into_state()?))
        }
        None => (resolve(common, || preset("lite-overfit"))?, None),
    };
    log_config(&cfg);
    let paths: Vec<PathBuf> = match manifest {
        Some(m) => DatasetManifest::load(m)?.split(Split::Train).map(|r| r.cloud.clone()).collect(),
        None if input.is_empty() => vec![PathBuf::from("synth.ply")],
        None => input.to_vec(),
    };
    let dataset = paths
        .iter()
        .map(|p| load_normalized(p).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    let out = out_path(common, "run");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_atomic(&out.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    let opts = FitOptions {
        out_dir: Some(out.clone()),
        max_epochs: epochs,
    };
    let report = fit(&dataset, &cfg, state, &opts, &mut |line| println!("{line}"))?;
    if report.checkpoints.is_empty() {
        // Already at epochs_total; still leave the state on disk.
        let path = out.join("final.ckpt");
        save_checkpoint(&path, &Checkpoint::from_state(&cfg, &report.state))?;
    }
    eprintln!("wrote {} checkpoints to {}", report.checkpoints.len(), out.display());
    Ok(())
}

fn run_extract(common: &Common, m: &ModelInput) -> Result<()> {
    let (model, cfg) = load_model(common, &m.checkpoint)?;
    log_config(&cfg);
    let (cloud, norm) = load_normalized(&m.input)?;
    let k = extract(&model, &cloud, &norm, &cfg.extract)?;
    if let Some(d) = &k.provenance.diagnostic {
        eprintln!("warning: {d}");
    }
    let out = out_path(common, "keypoints.txt");
    k.save(&out, &norm, &cfg.extract)?;
    eprintln!("wrote {} keypoints to {}", k.len(), out.display());
    Ok(())
}

fn reconstruct(common: &Common, m: &ModelInput, iso: f64, resolution: usize) -> Result<()> {
    let (model, cfg) = load_model(common, &m.checkpoint)?;
    log_config(&cfg);
    let (cloud, norm) = load_normalized(&m.input)?;
    let mesh = reconstruct_surface(&model, &cloud, iso, resolution)?;
    if let Some(d) = &mesh.diagnostic {
        eprintln!("warning: {d}");
    }
    let out = out_path(common, "mesh.ply");
    save_mesh_ply(&out, &denormalize(&mesh.vertices, &norm), &mesh.triangles)?;
    eprintln!("wrote {} triangles to {}", mesh.triangles.len(), out.display());
    Ok(())
}

fn slice(common: &Common, m: &ModelInput, field: &str, axis: &str, mode: &str, resolution: usize) -> Result<()> {
    let (model, cfg) = load_model(common, &m.checkpoint)?;
    log_config(&cfg);
    let (cloud, _) = load_normalized(&m.input)?;
    let img = field_slice(&model, &cloud, field.parse()?, axis.parse()?, mode.parse()?, resolution)?;
    let out = out_path(common, "slice.csv");
    let is_pgm = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let text = if is_pgm { img.to_pgm() } else { img.to_csv() };
    write_atomic(&out, text.as_bytes())?;
    eprintln!("wrote {}x{} slice to {}", img.width, img.height, out.display());
    Ok(())
}

fn eval_repeat(
    common: &Common,
    m: &ModelInput,
    kind: SweepKind,
    values: &[f64],
    views: usize,
    max_rotation_deg: f64,
    max_translation: f64,
) -> Result<()> {
    let (model, cfg) = load_model(common, &m.checkpoint)?;
    log_config(&cfg);
    let (cloud, norm) = load_normalized(&m.input)?;
    let values = if values.is_empty() {
        match kind {
            SweepKind::Threshold => cfg.eval.thresholds.iter().copied().filter(|t| *t > 0.0).collect(),
            SweepKind::Downsample => vec![1.0, 2.0, 4.0, 8.0],
            SweepKind::Noise => vec![0.0, 0.02, 0.04, 0.06],
        }
    } else {
        values.to_vec()
    };
    let sweep = match kind {
        SweepKind::Threshold => Sweep::Threshold(values),
        SweepKind::Downsample => Sweep::Downsample(values),
        SweepKind::Noise => Sweep::Noise(values),
    };
    let mut rng = eval_rng(common);
    let mut detect = |c: &PointCloud| extract(&model, c, &norm, &cfg.extract).map(|k| k.points);
    let report = repeatability_sweep(
        &mut detect,
        &cloud,
        views,
        &sweep,
        &cfg.eval,
        max_rotation_deg.to_radians(),
        max_translation,
        &mut rng,
    )?;
    if let Some(i) = report.monotone_violation {
        eprintln!("warning: {} sweep is not monotone at value index {i}", report.sweep);
    }
    let out = out_path(common, "repeatability.csv");
    write_atomic(&out, report.to_csv().as_bytes())?;
    for p in &report.points {
        eprintln!("{}={} repeatability={:.4}", report.sweep, p.value, p.repeatability);
    }
    Ok(())
}

fn miou_csv(thresholds: &[f64], miou: &[f64], instances: usize) -> String {
    let mut out = String::from("threshold,miou\n");
    for (t, v) in thresholds.iter().zip(miou) {
        out.push_str(&format!("{t},{v}\n"));
    }
    out.push_str(&format!("# instances={instances}\n"));
    out
}

fn eval_semantic(common: &Common, checkpoint: &Path, manifest: &Path, protocol: Protocol) -> Result<()> {
    let (model, cfg) = load_model(common, checkpoint)?;
    log_config(&cfg);
    let manifest = DatasetManifest::load(manifest)?;
    let mut params = cfg.extract;
    params.max_keypoints = Some(cfg.eval.n_keypoints);
    let thresholds = &cfg.eval.thresholds;
    let (miou, count) = match protocol {
        Protocol::Annotated => {
            let mut instances = Vec::new();
            for r in manifest.split(Split::Test) {
                let Some(ann) = &r.annotation else { continue };
                let (cloud, norm) = load_normalized(&r.cloud)?;
                let k = extract(&model, &cloud, &norm, &params)?;
                let reference: Vec<_> = load_cloud(ann)?.iter().map(|p| norm.to_canonical(p)).collect();
                let dist = geodesic_between(&cloud, &k.points, &reference, cfg.eval.geodesic_k)?;
                instances.push(AnnotatedInstance::new(dist, reference.len())?);
            }
            (semantic_miou_annotated(&instances, thresholds)?, instances.len())
        }
        Protocol::Pairwise => {
            let mut instances = Vec::new();
            for r in manifest.split(Split::Test) {
                let Some((partner, _)) = &r.partner else { continue };
                let (c1, n1) = load_normalized(&r.cloud)?;
                let (c2, n2) = load_normalized(partner)?;
                let kps_1 = extract(&model, &c1, &n1, &params)?.points;
                let kps_2 = extract(&model, &c2, &n2, &params)?.points;
                instances.push(PairedInstance {
                    kps_1,
                    kps_2,
                    correspondence: Correspondence::new(c1.points().to_vec(), c2.points().to_vec())?,
                });
            }
            (semantic_miou_pairwise(&instances, thresholds)?, instances.len())
        }
    };
    let out = out_path(common, "semantic.csv");
    write_atomic(&out, miou_csv(thresholds, &miou, count).as_bytes())?;
    eprintln!("mIoU over {count} instances: {miou:?}");
    Ok(())
}

fn eval_register(
    common: &Common,
    checkpoint: &Path,
    manifest: &Path,
    kind: DescriptorKind,
    radius: f64,
) -> Result<()> {
    let (model, cfg) = load_model(common, checkpoint)?;
    log_config(&cfg);
    let manifest = DatasetManifest::load(manifest)?;
    let mut pairs = Vec::new();
    for r in manifest.split(Split::Test) {
        let Some((partner, transform)) = &r.partner else { continue };
        pairs.push(RegistrationPair {
            a: PointCloud::new(load_cloud(&r.cloud)?)?,
            b: PointCloud::new(load_cloud(partner)?)?,
            transform: *transform,
            scale: r.scale,
        });
    }
    // Clouds stay raw; the detector normalizes each one for the model.
    let params = cfg.extract;
    let mut detector = |c: &PointCloud, n: usize| -> Result<KeypointSet> {
        let (canon, norm) = normalize_cloud(c.points())?;
        let mut k = extract(&model, &canon, &norm, &ExtractParams { max_keypoints: Some(n), ..params })?;
        k.points = denormalize(&k.points, &norm);
        Ok(k)
    };
    let mut histogram = HistogramDescriptor { radius, ..HistogramDescriptor::default() };
    let mut random = RandomDescriptor {
        rng: ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0) ^ 0x5eed),
        width: 16,
    };
    let descriptor: &mut dyn Descriptor = match kind {
        DescriptorKind::Histogram => &mut histogram,
        DescriptorKind::Random => &mut random,
    };
    let mut rng = eval_rng(common);
    let report = registration_metrics(&pairs, &mut detector, descriptor, cfg.eval.n_keypoints, &cfg.eval, &mut rng)?;
    let out = out_path(common, "registration.csv");
    write_atomic(&out, report.to_csv().as_bytes())?;
    eprintln!("fmr={} rr={} inlier_ratio={} over {} pairs", report.fmr, report.rr, report.inlier_ratio, pairs.len());
    Ok(())
}
