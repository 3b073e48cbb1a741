//! Training pairs, the optimizer loop and per-epoch persistence.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{save_checkpoint, write_atomic, Checkpoint, Config};
use crate::error::{Error, Result};
use crate::field_model::{FieldModel, ModelConfig};
use crate::geometry::{
    add_gaussian_noise, apply_transform, build_query_grids, random_downsample, random_se3, PointCloud, QueryGrid,
    RigidTransform,
};
use crate::losses::{evaluate_loss, sample_occupancy_batch, LossOptions, LossReport, LossWeights, OccupancyBatch};

/// Perturbations applied when building the second view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Downsample rate drawn uniformly from `[1, max_downsample]`.
    pub max_downsample: f64,
    /// Noise sigma drawn uniformly from `[noise_min, noise_max]`.
    pub noise_min: f64,
    pub noise_max: f64,
    /// Largest rotation angle (radians) of the pairing transform.
    pub max_rotation: f64,
    pub max_translation: f64,
    /// Rotate the first view by a random rotation too, so that a small
    /// dataset is seen in many orientations.
    pub base_rotation: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_downsample: 4.0,
            noise_min: 0.0,
            noise_max: 0.01,
            max_rotation: PI,
            max_translation: 0.1,
            base_rotation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Points per training cloud.
    pub n_points: usize,
    /// Samples per axis of each local query grid.
    pub grid_resolution: [usize; 3],
    /// Grids have side `1 / grid_scale`.
    pub grid_scale: f64,
    pub n_grids: usize,
    pub batch_size: usize,
    /// Epochs run at the initial learning rate.
    pub epochs_first: usize,
    pub epochs_total: usize,
    pub thr_o: f64,
    pub lr: f64,
    pub lr_drop_factor: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Optimizer steps per epoch; 0 means one pass over the dataset.
    pub iters_per_epoch: usize,
    pub aug: AugmentConfig,
    pub loss_weights: LossWeights,
    /// Leading epochs trained on the occupancy term alone.
    pub occupancy_warmup: usize,
    pub symmetric: bool,
    pub seed: u64,
    /// Threads computing per-item gradients. Results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_points: 2048,
            grid_resolution: [8, 8, 8],
            grid_scale: 8.0,
            n_grids: 500,
            batch_size: 16,
            epochs_first: 40,
            epochs_total: 60,
            thr_o: 0.5,
            lr: 1e-4,
            lr_drop_factor: 10.0,
            n_pos: 2048,
            n_neg: 2048,
            iters_per_epoch: 0,
            aug: AugmentConfig::default(),
            loss_weights: LossWeights::default(),
            occupancy_warmup: 0,
            symmetric: false,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epochs_first > 0 && self.epochs_first < self.epochs_total) {
            return Err(Error::invalid(
                "epochs_first",
                format!("need 0 < ef < el, got {}/{}", self.epochs_first, self.epochs_total),
            ));
        }
        if self.occupancy_warmup >= self.epochs_total {
            return Err(Error::invalid(
                "occupancy_warmup",
                format!("{} warm-up epochs leave no full-loss epoch of {}", self.occupancy_warmup, self.epochs_total),
            ));
        }
        if !(self.thr_o > 0.0 && self.thr_o <= 0.5) {
            return Err(Error::invalid("thr_o", format!("{} outside (0, 0.5]", self.thr_o)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.n_points == 0 || self.n_grids == 0 {
            return Err(Error::invalid("n_points", "n_points and n_grids must be >= 1"));
        }
        if !(self.grid_scale > 0.0) {
            return Err(Error::invalid("grid_scale", "must be > 0"));
        }
        if self.grid_resolution.iter().any(|&r| r < 2) {
            return Err(Error::invalid("grid_resolution", "every axis needs >= 2"));
        }
        if !(self.lr >= 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(Error::invalid("lr", "lr must be >= 0 and lr_drop_factor > 0"));
        }
        let a = &self.aug;
        if !(a.max_downsample >= 1.0) {
            return Err(Error::invalid("max_downsample", "must be >= 1"));
        }
        if !(a.noise_min >= 0.0 && a.noise_min <= a.noise_max) {
            return Err(Error::invalid("noise_min", "need 0 <= noise_min <= noise_max"));
        }
        if !(a.max_rotation >= 0.0 && a.max_translation >= 0.0) {
            return Err(Error::invalid("max_rotation", "rotation and translation ranges must be >= 0"));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            thr_o: self.thr_o,
            weights: self.loss_weights,
            symmetric: self.symmetric,
        }
    }

    /// Loss options in force during `epoch`: occupancy only while warming up.
    pub fn loss_options_at(&self, epoch: usize) -> LossOptions {
        let mut opts = self.loss_options();
        if epoch < self.occupancy_warmup {
            opts.weights = LossWeights {
                o: self.loss_weights.o,
                r: 0.0,
                m: 0.0,
                s: 0.0,
            };
        }
        opts
    }
}

/// Learning rate for `epoch`: `lr` before `epochs_first`, divided by
/// `lr_drop_factor` afterwards.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs_total {
        return Err(Error::invalid(
            "epoch",
            format!("{epoch} outside [0, {})", cfg.epochs_total),
        ));
    }
    Ok(if epoch < cfg.epochs_first { cfg.lr } else { cfg.lr / cfg.lr_drop_factor })
}

/// One training example: a cloud, a transformed and perturbed second view,
/// local query grids on the first view and an occupancy batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatchItem {
    pub p: PointCloud,
    pub tp: PointCloud,
    pub transform: RigidTransform,
    pub grids: Vec<QueryGrid>,
    /// Grids on `tp`, present when the reverse pairing is scored.
    pub reverse_grids: Option<Vec<QueryGrid>>,
    pub occupancy: OccupancyBatch,
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> Result<RigidTransform> {
    random_se3(rng, max_angle, 0.0)
}

pub fn make_training_pair<R: Rng + ?Sized>(cloud: &PointCloud, cfg: &TrainConfig, rng: &mut R) -> Result<TrainBatchItem> {
    let mut p = if cloud.len() > cfg.n_points {
        let mut idx = index::sample(rng, cloud.len(), cfg.n_points).into_vec();
        idx.sort_unstable();
        PointCloud::new(idx.into_iter().map(|i| cloud.points()[i]).collect())?
    } else {
        cloud.clone()
    };
    let a = &cfg.aug;
    if a.enabled && a.base_rotation {
        let r = random_rotation(rng, PI)?;
        p = PointCloud::new(apply_transform(p.points(), &r))?;
    }
    let (transform, tp) = if a.enabled {
        let t = random_se3(rng, a.max_rotation, a.max_translation)?;
        let moved = PointCloud::new(apply_transform(p.points(), &t))?;
        let rate = rng.random_range(1.0..=a.max_downsample);
        let down = random_downsample(&moved, rate, rng)?;
        let sigma = rng.random_range(a.noise_min..=a.noise_max);
        (t, add_gaussian_noise(&down, sigma, rng)?)
    } else {
        (RigidTransform::identity(), p.clone())
    };
    let grids = build_query_grids(&p, cfg.n_grids, cfg.grid_scale, cfg.grid_resolution, rng)?;
    let reverse_grids = if cfg.symmetric {
        Some(build_query_grids(&tp, cfg.n_grids, cfg.grid_scale, cfg.grid_resolution, rng)?)
    } else {
        None
    };
    let occupancy = sample_occupancy_batch(&p, cfg.n_pos.min(p.len()), cfg.n_neg, rng)?;
    Ok(TrainBatchItem {
        p,
        tp,
        transform,
        grids,
        reverse_grids,
        occupancy,
    })
}

/// First and second moment estimates of the adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: FieldModel,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean loss report of every finished epoch.
    pub history: Vec<LossReport>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh model and optimizer, both seeded from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let model = FieldModel::new(model_cfg, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState::new(model.num_params()),
            model,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            rng,
        })
    }
}

/// Loss of each item and the gradient of their mean, summed in item order
/// whatever the number of workers.
fn batch_gradient(
    model: &FieldModel,
    items: &[TrainBatchItem],
    opts: &LossOptions,
    workers: usize,
) -> Result<(Vec<LossReport>, Vec<f64>)> {
    let n = model.num_params();
    let scale = 1.0 / items.len() as f64;
    let run = |item: &TrainBatchItem| -> Result<(LossReport, Vec<f64>)> {
        let mut g = vec![0.0; n];
        let e = evaluate_loss(model, item, opts, Some(&mut g), scale)?;
        Ok((e.report, g))
    };
    let per_item: Vec<Result<(LossReport, Vec<f64>)>> = if workers <= 1 || items.len() == 1 {
        items.iter().map(run).collect()
    } else {
        let chunk = items.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let mut grads = vec![0.0; n];
    let mut reports = Vec::with_capacity(items.len());
    for r in per_item {
        let (report, g) = r?;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        reports.push(report);
    }
    Ok((reports, grads))
}

/// One optimizer step on the mean loss of `items`.
pub fn train_step(state: &mut TrainState, items: &[TrainBatchItem], cfg: &TrainConfig) -> Result<LossReport> {
    if items.is_empty() {
        return Err(Error::invalid("items", "empty batch"));
    }
    let epoch = state.epoch.min(cfg.epochs_total - 1);
    let lr = lr_schedule(epoch, cfg)?;
    let (reports, grads) = batch_gradient(&state.model, items, &cfg.loss_options_at(epoch), cfg.workers)?;
    let report = LossReport::mean(&reports);
    if let Some(term) = report.non_finite_term() {
        return Err(Error::Diverged { term, step: state.step });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = state
            .model
            .layout()
            .sections()
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len)
            .map_or("?", |s| s.name.as_str())
            .to_string();
        return Err(Error::invalid("gradient", format!("non-finite gradient in `{name}` at step {}", state.step)));
    }
    state.adam.update(state.model.params_mut(), &grads, lr);
    state.step += 1;
    Ok(report)
}

/// `epoch=E step=S l_o=.. l_r=.. l_m=.. l_s=.. total=.. lr=..`
pub fn progress_line(epoch: usize, step: u64, r: &LossReport, lr: f64) -> String {
    format!(
        "epoch={epoch} step={step} l_o={:.6} l_r={:.6} l_m={:.6} l_s={:.6} total={:.6} lr={lr:e}",
        r.l_o, r.l_r, r.l_m, r.l_s, r.total
    )
}

/// Per-epoch history as CSV.
pub fn history_csv(history: &[LossReport], cfg: &TrainConfig) -> String {
    let mut out = String::from("epoch,l_o,l_r,l_m,l_s,total,lr\n");
    for (e, r) in history.iter().enumerate() {
        let lr = lr_schedule(e.min(cfg.epochs_total - 1), cfg).unwrap_or(f64::NAN);
        out.push_str(&format!("{e},{},{},{},{},{},{lr:e}\n", r.l_o, r.l_r, r.l_m, r.l_s, r.total));
    }
    out
}

#[derive(Debug)]
pub struct FitReport {
    pub state: TrainState,
    /// Checkpoints written, one per epoch run.
    pub checkpoints: Vec<PathBuf>,
}

/// Where and how far [`fit`] runs.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Directory for `epoch_NNNN.ckpt` files and `train_log.csv`; nothing is
    /// written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many epochs of this call (the schedule still spans
    /// `epochs_total`).
    pub max_epochs: Option<usize>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Trains from `state` (or from scratch) until `epochs_total`, writing a
/// checkpoint and the loss history after every epoch.
pub fn fit(
    dataset: &[PointCloud],
    config: &Config,
    state: Option<TrainState>,
    opts: &FitOptions,
    progress: &mut dyn FnMut(&str),
) -> Result<FitReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "no training clouds"));
    }
    let cfg = &config.train;
    cfg.validate()?;
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(config.model.clone(), cfg)?,
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let steps = if cfg.iters_per_epoch > 0 {
        cfg.iters_per_epoch
    } else {
        dataset.len().div_ceil(cfg.batch_size)
    };
    let mut checkpoints = Vec::new();
    let mut ran = 0;
    while state.epoch < cfg.epochs_total && opts.max_epochs.is_none_or(|m| ran < m) {
        let lr = lr_schedule(state.epoch, cfg)?;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut state.rng);
        let mut reports = Vec::with_capacity(steps);
        for s in 0..steps {
            let items = (0..cfg.batch_size)
                .map(|j| make_training_pair(&dataset[order[(s * cfg.batch_size + j) % order.len()]], cfg, &mut state.rng))
                .collect::<Result<Vec<_>>>()?;
            let report = train_step(&mut state, &items, cfg)?;
            progress(&progress_line(state.epoch, state.step, &report, lr));
            reports.push(report);
        }
        state.history.push(LossReport::mean(&reports));
        state.epoch += 1;
        ran += 1;
        if let Some(dir) = &opts.out_dir {
            let path = checkpoint_path(dir, state.epoch - 1);
            save_checkpoint(&path, &Checkpoint::from_state(config, &state))?;
            write_atomic(&dir.join("train_log.csv"), history_csv(&state.history, cfg).as_bytes())?;
            checkpoints.push(path);
        }
    }
    Ok(FitReport { state, checkpoints })
}

#[cfg(test)]
mod tests;
