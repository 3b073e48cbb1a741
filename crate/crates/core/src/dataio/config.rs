//! Run configuration: a TOML file with `[model]`, `[train]`, `[extract]` and
//! `[eval]` sections, optionally layered on a named preset.
//!
//! ```toml
//! preset = "modelnet40"   # optional; keys below override it
//!
//! [train]
//! batch_size = 8
//! ```
//!
//! Without a preset every required key must be present. Unknown keys are
//! rejected.

use std::path::Path;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::evalsuite::EvalParams;
use crate::field_model::ModelConfig;
use crate::inference::ExtractParams;
use crate::trainer::{AugmentConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub extract: ExtractParams,
    pub eval: EvalParams,
}

pub const PRESETS: [&str; 7] = [
    "keypointnet",
    "smpl",
    "modelnet40",
    "3dmatch",
    "registration",
    "lite-overfit",
    "lite-smoke",
];

/// Keys that must be given when no preset supplies them.
const REQUIRED: [(&str, &str); 14] = [
    ("model", "encoder"),
    ("model", "volume_resolution"),
    ("train", "n_points"),
    ("train", "grid_resolution"),
    ("train", "grid_scale"),
    ("train", "n_grids"),
    ("train", "batch_size"),
    ("train", "epochs_first"),
    ("train", "epochs_total"),
    ("train", "thr_o"),
    ("extract", "lambda"),
    ("extract", "iterations"),
    ("extract", "thr_o"),
    ("extract", "thr_s"),
];

struct Row {
    n: usize,
    h: usize,
    hl: usize,
    u: f64,
    n_grids: usize,
    b: usize,
    ef: usize,
    el: usize,
    thr_s: f64,
    nms_radius: f64,
    raw_units: bool,
    epsilon: f64,
}

fn table_row(r: Row) -> Config {
    let model = ModelConfig::full([r.h; 3]);
    let train = TrainConfig {
        n_points: r.n,
        grid_resolution: [r.hl; 3],
        grid_scale: r.u,
        n_grids: r.n_grids,
        batch_size: r.b,
        epochs_first: r.ef,
        epochs_total: r.el,
        thr_o: 0.5,
        ..TrainConfig::default()
    };
    let extract = ExtractParams {
        lambda: 1e-3,
        iterations: 10,
        thr_o: 0.5,
        thr_s: r.thr_s,
        nms_radius: r.nms_radius,
        raw_units: r.raw_units,
        ..ExtractParams::default()
    };
    let eval = EvalParams {
        epsilon: r.epsilon,
        raw_units: r.raw_units,
        ..EvalParams::default()
    };
    Config {
        preset: None,
        model,
        train,
        extract,
        eval,
    }
}

/// Built-in configurations. The five dataset presets carry the published
/// training and testing hyper-parameters; `lite-overfit` trains the small
/// encoder on a single shape; `lite-smoke` is a seconds-long pipeline check.
pub fn preset(name: &str) -> Result<Config> {
    let mut cfg = match name {
        "keypointnet" => table_row(Row {
            n: 2048, h: 64, hl: 8, u: 8.0, n_grids: 500, b: 16, ef: 40, el: 60, thr_s: 0.7,
            nms_radius: 0.1, raw_units: false, epsilon: 0.04,
        }),
        "smpl" => table_row(Row {
            n: 2048, h: 64, hl: 8, u: 8.0, n_grids: 500, b: 16, ef: 20, el: 30, thr_s: 0.7,
            nms_radius: 0.1, raw_units: false, epsilon: 0.04,
        }),
        "modelnet40" => table_row(Row {
            n: 5000, h: 64, hl: 8, u: 6.0, n_grids: 500, b: 16, ef: 40, el: 60, thr_s: 0.7,
            nms_radius: 0.01, raw_units: false, epsilon: 0.04,
        }),
        "3dmatch" => table_row(Row {
            n: 10000, h: 100, hl: 10, u: 8.0, n_grids: 150, b: 6, ef: 15, el: 20, thr_s: 0.7,
            nms_radius: 0.04, raw_units: true, epsilon: 0.2,
        }),
        "registration" => table_row(Row {
            n: 2048, h: 64, hl: 6, u: 12.0, n_grids: 500, b: 16, ef: 40, el: 60, thr_s: 0.4,
            nms_radius: 0.05, raw_units: true, epsilon: 0.04,
        }),
        "lite-overfit" => lite_overfit(),
        "lite-smoke" => lite_smoke(),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    cfg.preset = Some(name.to_string());
    Ok(cfg)
}

fn lite_overfit() -> Config {
    let model = ModelConfig {
        c1: 32,
        c2: 32,
        ce: 32,
        ..ModelConfig::lite([16, 16, 16])
    };
    let train = TrainConfig {
        n_points: 2048,
        grid_resolution: [4, 4, 4],
        grid_scale: 8.0,
        n_grids: 32,
        batch_size: 1,
        epochs_first: 2,
        epochs_total: 5,
        lr: 3e-3,
        lr_drop_factor: 10.0,
        n_pos: 512,
        n_neg: 512,
        iters_per_epoch: 400,
        occupancy_warmup: 2,
        aug: AugmentConfig {
            base_rotation: true,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    let extract = ExtractParams {
        lambda: 1e-3,
        iterations: 10,
        thr_o: 0.5,
        thr_s: 0.7,
        nms_radius: 0.05,
        ..ExtractParams::default()
    };
    Config {
        preset: None,
        model,
        train,
        extract,
        eval: EvalParams::default(),
    }
}

fn lite_smoke() -> Config {
    let mut cfg = lite_overfit();
    cfg.model = ModelConfig {
        c1: 8,
        c2: 8,
        ce: 8,
        point_hidden: 8,
        pos_hidden: 8,
        decoder_hidden: 8,
        decoder_blocks: 1,
        ..ModelConfig::lite([8, 8, 8])
    };
    cfg.train.n_points = 512;
    cfg.train.grid_resolution = [4, 4, 4];
    cfg.train.n_grids = 8;
    cfg.train.n_pos = 128;
    cfg.train.n_neg = 128;
    cfg.train.iters_per_epoch = 3;
    cfg.train.epochs_first = 1;
    cfg.train.epochs_total = 2;
    cfg.train.occupancy_warmup = 0;
    cfg.extract.infer_grid_resolution = Some([12, 12, 12]);
    cfg
}

fn type_err(section: &str, key: &str, want: &str, v: &Value) -> Error {
    Error::Config(format!("`{section}.{key}`: expected {want}, found `{v}`"))
}

fn as_f64(s: &str, k: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_err(s, k, "a number", v)),
    }
}

fn as_usize(s: &str, k: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(type_err(s, k, "a non-negative integer", v)),
    }
}

fn as_u64(s: &str, k: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(type_err(s, k, "a non-negative integer", v)),
    }
}

fn as_bool(s: &str, k: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_err(s, k, "true or false", v))
}

/// `[h, w, d]` or a single integer for a cube.
fn as_res3(s: &str, k: &str, v: &Value) -> Result<[usize; 3]> {
    match v {
        Value::Integer(_) => Ok([as_usize(s, k, v)?; 3]),
        Value::Array(a) if a.len() == 3 => {
            Ok([as_usize(s, k, &a[0])?, as_usize(s, k, &a[1])?, as_usize(s, k, &a[2])?])
        }
        _ => Err(type_err(s, k, "an integer or [h, w, d]", v)),
    }
}

fn as_f64_list(s: &str, k: &str, v: &Value) -> Result<Vec<f64>> {
    match v {
        Value::Array(a) => a.iter().map(|x| as_f64(s, k, x)).collect(),
        _ => Err(type_err(s, k, "an array of numbers", v)),
    }
}

fn as_usize_list(s: &str, k: &str, v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::Array(a) => a.iter().map(|x| as_usize(s, k, x)).collect(),
        _ => Err(type_err(s, k, "an array of integers", v)),
    }
}

fn res_value(r: [usize; 3]) -> Value {
    Value::Array(r.iter().map(|&x| Value::Integer(x as i64)).collect())
}

fn list_value<T: Copy>(xs: &[T], f: impl Fn(T) -> Value) -> Value {
    Value::Array(xs.iter().map(|&x| f(x)).collect())
}

impl Config {
    /// Sets one key; `section` is `model`, `train`, `extract` or `eval`.
    pub fn set(&mut self, section: &str, key: &str, v: &Value) -> Result<()> {
        let (s, k) = (section, key);
        match (s, k) {
            ("model", "encoder") => {
                self.model.encoder = v.as_str().ok_or_else(|| type_err(s, k, "\"full\" or \"lite\"", v))?.parse()?
            }
            ("model", "volume_resolution") => self.model.volume_resolution = as_res3(s, k, v)?,
            ("model", "c1") => self.model.c1 = as_usize(s, k, v)?,
            ("model", "c2") => self.model.c2 = as_usize(s, k, v)?,
            ("model", "ce") => self.model.ce = as_usize(s, k, v)?,
            ("model", "point_hidden") => self.model.point_hidden = as_usize(s, k, v)?,
            ("model", "point_blocks") => self.model.point_blocks = as_usize(s, k, v)?,
            ("model", "unet_levels") => self.model.unet_levels = as_usize(s, k, v)?,
            ("model", "pos_hidden") => self.model.pos_hidden = as_usize(s, k, v)?,
            ("model", "decoder_hidden") => self.model.decoder_hidden = as_usize(s, k, v)?,
            ("model", "decoder_blocks") => self.model.decoder_blocks = as_usize(s, k, v)?,

            ("train", "n_points") => self.train.n_points = as_usize(s, k, v)?,
            ("train", "grid_resolution") => self.train.grid_resolution = as_res3(s, k, v)?,
            ("train", "grid_scale") => self.train.grid_scale = as_f64(s, k, v)?,
            ("train", "n_grids") => self.train.n_grids = as_usize(s, k, v)?,
            ("train", "batch_size") => self.train.batch_size = as_usize(s, k, v)?,
            ("train", "epochs_first") => self.train.epochs_first = as_usize(s, k, v)?,
            ("train", "epochs_total") => self.train.epochs_total = as_usize(s, k, v)?,
            ("train", "thr_o") => self.train.thr_o = as_f64(s, k, v)?,
            ("train", "lr") => self.train.lr = as_f64(s, k, v)?,
            ("train", "lr_drop_factor") => self.train.lr_drop_factor = as_f64(s, k, v)?,
            ("train", "n_pos") => self.train.n_pos = as_usize(s, k, v)?,
            ("train", "n_neg") => self.train.n_neg = as_usize(s, k, v)?,
            ("train", "iters_per_epoch") => self.train.iters_per_epoch = as_usize(s, k, v)?,
            ("train", "augment") => self.train.aug.enabled = as_bool(s, k, v)?,
            ("train", "max_downsample") => self.train.aug.max_downsample = as_f64(s, k, v)?,
            ("train", "noise_min") => self.train.aug.noise_min = as_f64(s, k, v)?,
            ("train", "noise_max") => self.train.aug.noise_max = as_f64(s, k, v)?,
            ("train", "max_rotation") => self.train.aug.max_rotation = as_f64(s, k, v)?,
            ("train", "max_translation") => self.train.aug.max_translation = as_f64(s, k, v)?,
            ("train", "base_rotation") => self.train.aug.base_rotation = as_bool(s, k, v)?,
            ("train", "weight_o") => self.train.loss_weights.o = as_f64(s, k, v)?,
            ("train", "weight_r") => self.train.loss_weights.r = as_f64(s, k, v)?,
            ("train", "weight_m") => self.train.loss_weights.m = as_f64(s, k, v)?,
            ("train", "weight_s") => self.train.loss_weights.s = as_f64(s, k, v)?,
            ("train", "occupancy_warmup") => self.train.occupancy_warmup = as_usize(s, k, v)?,
            ("train", "symmetric") => self.train.symmetric = as_bool(s, k, v)?,
            ("train", "seed") => self.train.seed = as_u64(s, k, v)?,
            ("train", "workers") => self.train.workers = as_usize(s, k, v)?.max(1),

            ("extract", "lambda") => self.extract.lambda = as_f64(s, k, v)?,
            ("extract", "iterations") => self.extract.iterations = as_usize(s, k, v)?,
            ("extract", "thr_o") => self.extract.thr_o = as_f64(s, k, v)?,
            ("extract", "thr_s") => self.extract.thr_s = as_f64(s, k, v)?,
            ("extract", "infer_grid_resolution") => {
                let r = as_res3(s, k, v)?;
                self.extract.infer_grid_resolution = if r == [0; 3] { None } else { Some(r) };
            }
            ("extract", "nms_radius") => self.extract.nms_radius = as_f64(s, k, v)?,
            ("extract", "max_keypoints") => {
                let n = as_usize(s, k, v)?;
                self.extract.max_keypoints = (n > 0).then_some(n);
            }
            ("extract", "snap_to_input") => self.extract.snap_to_input = as_bool(s, k, v)?,
            ("extract", "raw_units") => self.extract.raw_units = as_bool(s, k, v)?,

            ("eval", "epsilon") => self.eval.epsilon = as_f64(s, k, v)?,
            ("eval", "thresholds") => self.eval.thresholds = as_f64_list(s, k, v)?,
            ("eval", "n_keypoints") => self.eval.n_keypoints = as_usize(s, k, v)?,
            ("eval", "geodesic_k") => self.eval.geodesic_k = as_usize(s, k, v)?,
            ("eval", "tau1") => self.eval.tau1 = as_f64(s, k, v)?,
            ("eval", "tau2") => self.eval.tau2 = as_f64(s, k, v)?,
            ("eval", "rr_rotation_deg") => self.eval.rr_rotation_deg = as_f64(s, k, v)?,
            ("eval", "rr_translation") => self.eval.rr_translation = as_f64(s, k, v)?,
            ("eval", "ransac_iterations") => self.eval.ransac_iterations = as_usize(s, k, v)?,
            ("eval", "ransac_inlier_radius") => self.eval.ransac_inlier_radius = as_f64(s, k, v)?,
            ("eval", "budgets") => self.eval.budgets = as_usize_list(s, k, v)?,
            ("eval", "monotone_tolerance") => self.eval.monotone_tolerance = as_f64(s, k, v)?,
            ("eval", "raw_units") => self.eval.raw_units = as_bool(s, k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{s}.{k}`"))),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override. Values are TOML literals;
    /// bare words are taken as strings.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key `{path}` is not section.key")))?;
        let raw = raw.trim();
        let value = match format!("v = {raw}").parse::<Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => Value::String(raw.to_string()),
        };
        self.set(section, key, &value)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.extract.validate()?;
        self.eval.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut cfg = match table.get("preset") {
            Some(Value::String(name)) => preset(name)?,
            Some(v) => return Err(Error::Config(format!("`preset`: expected a string, found `{v}`"))),
            None => {
                for (s, k) in REQUIRED {
                    if table.get(s).and_then(|t| t.get(k)).is_none() {
                        return Err(Error::MissingKey(format!("{s}.{k}")));
                    }
                }
                preset("keypointnet")?
            }
        };
        if table.get("preset").is_none() {
            cfg.preset = None;
        }
        for (name, value) in &table {
            match (name.as_str(), value) {
                ("preset", _) => {}
                ("model" | "train" | "extract" | "eval", Value::Table(t)) => {
                    for (k, v) in t {
                        cfg.set(name, k, v)?;
                    }
                }
                (other, Value::Table(_)) => return Err(Error::Config(format!("unknown section `[{other}]`"))),
                (other, _) => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every key, fully resolved; parsing the result gives back `self`.
    pub fn to_toml_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let x = &self.extract;
        let e = &self.eval;
        let int = |v: usize| Value::Integer(v as i64);
        let mut model = Table::new();
        model.insert("encoder".into(), Value::String(m.encoder.as_str().into()));
        model.insert("volume_resolution".into(), res_value(m.volume_resolution));
        model.insert("c1".into(), int(m.c1));
        model.insert("c2".into(), int(m.c2));
        model.insert("ce".into(), int(m.ce));
        model.insert("point_hidden".into(), int(m.point_hidden));
        model.insert("point_blocks".into(), int(m.point_blocks));
        model.insert("unet_levels".into(), int(m.unet_levels));
        model.insert("pos_hidden".into(), int(m.pos_hidden));
        model.insert("decoder_hidden".into(), int(m.decoder_hidden));
        model.insert("decoder_blocks".into(), int(m.decoder_blocks));

        let mut train = Table::new();
        train.insert("n_points".into(), int(t.n_points));
        train.insert("grid_resolution".into(), res_value(t.grid_resolution));
        train.insert("grid_scale".into(), Value::Float(t.grid_scale));
        train.insert("n_grids".into(), int(t.n_grids));
        train.insert("batch_size".into(), int(t.batch_size));
        train.insert("epochs_first".into(), int(t.epochs_first));
        train.insert("epochs_total".into(), int(t.epochs_total));
        train.insert("thr_o".into(), Value::Float(t.thr_o));
        train.insert("lr".into(), Value::Float(t.lr));
        train.insert("lr_drop_factor".into(), Value::Float(t.lr_drop_factor));
        train.insert("n_pos".into(), int(t.n_pos));
        train.insert("n_neg".into(), int(t.n_neg));
        train.insert("iters_per_epoch".into(), int(t.iters_per_epoch));
        train.insert("augment".into(), Value::Boolean(t.aug.enabled));
        train.insert("max_downsample".into(), Value::Float(t.aug.max_downsample));
        train.insert("noise_min".into(), Value::Float(t.aug.noise_min));
        train.insert("noise_max".into(), Value::Float(t.aug.noise_max));
        train.insert("max_rotation".into(), Value::Float(t.aug.max_rotation));
        train.insert("max_translation".into(), Value::Float(t.aug.max_translation));
        train.insert("base_rotation".into(), Value::Boolean(t.aug.base_rotation));
        train.insert("weight_o".into(), Value::Float(t.loss_weights.o));
        train.insert("weight_r".into(), Value::Float(t.loss_weights.r));
        train.insert("weight_m".into(), Value::Float(t.loss_weights.m));
        train.insert("weight_s".into(), Value::Float(t.loss_weights.s));
        train.insert("occupancy_warmup".into(), int(t.occupancy_warmup));
        train.insert("symmetric".into(), Value::Boolean(t.symmetric));
        train.insert("seed".into(), Value::Integer(t.seed as i64));
        train.insert("workers".into(), int(t.workers));

        let mut extract = Table::new();
        extract.insert("lambda".into(), Value::Float(x.lambda));
        extract.insert("iterations".into(), int(x.iterations));
        extract.insert("thr_o".into(), Value::Float(x.thr_o));
        extract.insert("thr_s".into(), Value::Float(x.thr_s));
        extract.insert("infer_grid_resolution".into(), res_value(x.infer_grid_resolution.unwrap_or([0; 3])));
        extract.insert("nms_radius".into(), Value::Float(x.nms_radius));
        extract.insert("max_keypoints".into(), int(x.max_keypoints.unwrap_or(0)));
        extract.insert("snap_to_input".into(), Value::Boolean(x.snap_to_input));
        extract.insert("raw_units".into(), Value::Boolean(x.raw_units));

        let mut eval = Table::new();
        eval.insert("epsilon".into(), Value::Float(e.epsilon));
        eval.insert("thresholds".into(), list_value(&e.thresholds, Value::Float));
        eval.insert("n_keypoints".into(), int(e.n_keypoints));
        eval.insert("geodesic_k".into(), int(e.geodesic_k));
        eval.insert("tau1".into(), Value::Float(e.tau1));
        eval.insert("tau2".into(), Value::Float(e.tau2));
        eval.insert("rr_rotation_deg".into(), Value::Float(e.rr_rotation_deg));
        eval.insert("rr_translation".into(), Value::Float(e.rr_translation));
        eval.insert("ransac_iterations".into(), int(e.ransac_iterations));
        eval.insert("ransac_inlier_radius".into(), Value::Float(e.ransac_inlier_radius));
        eval.insert("budgets".into(), list_value(&e.budgets, int));
        eval.insert("monotone_tolerance".into(), Value::Float(e.monotone_tolerance));
        eval.insert("raw_units".into(), Value::Boolean(e.raw_units));

        let mut root = Table::new();
        if let Some(p) = &self.preset {
            root.insert("preset".into(), Value::String(p.clone()));
        }
        root.insert("model".into(), Value::Table(model));
        root.insert("train".into(), Value::Table(train));
        root.insert("extract".into(), Value::Table(extract));
        root.insert("eval".into(), Value::Table(eval));
        root.to_string()
    }
}
