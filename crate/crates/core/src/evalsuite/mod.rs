//! Evaluation protocols: relative repeatability and its perturbation
//! sweeps, semantic-consistency mIoU, and registration recall.

mod register;
mod repeat;
mod semantic;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{add_gaussian_noise, apply_transform, random_downsample, random_se3, PointCloud, RigidTransform, Vec3};

pub use register::{
    kabsch, match_descriptors, random_detector, ransac_rigid, registration_metrics, Descriptor, Detector,
    HistogramDescriptor, PairDiagnostics, RandomDescriptor, RandomDetector, RansacResult, RegistrationPair,
    RegistrationReport,
};
pub use repeat::{pair_repeatability, relative_repeatability, repeatability_curve, PairRepeatability, Repeatability};
pub use semantic::{
    geodesic_between, geodesic_distances, greedy_match_count, knn_graph, matching_iou, pairwise_distances,
    semantic_miou_annotated, semantic_miou_pairwise, AnnotatedInstance, Correspondence, PairedInstance,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    /// Repeatability distance threshold.
    pub epsilon: f64,
    /// mIoU distance thresholds.
    pub thresholds: Vec<f64>,
    pub n_keypoints: usize,
    /// Neighbors per point in the geodesic graph.
    pub geodesic_k: usize,
    /// A match is an inlier when its ground-truth residual is within `tau1`.
    pub tau1: f64,
    /// A pair counts for feature-matching recall above this inlier ratio.
    pub tau2: f64,
    pub rr_rotation_deg: f64,
    pub rr_translation: f64,
    pub ransac_iterations: usize,
    pub ransac_inlier_radius: f64,
    /// Keypoint budgets of a registration sweep.
    pub budgets: Vec<usize>,
    /// Allowed rise per step when checking that a sweep is non-increasing.
    pub monotone_tolerance: f64,
    /// Length thresholds are in meters and get divided by each input's
    /// meters-per-unit scale.
    pub raw_units: bool,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            epsilon: 0.04,
            thresholds: (0..=10).map(|i| i as f64 * 0.01).collect(),
            n_keypoints: 64,
            geodesic_k: 8,
            tau1: 0.1,
            tau2: 0.05,
            rr_rotation_deg: 15.0,
            rr_translation: 0.3,
            ransac_iterations: 1000,
            ransac_inlier_radius: 0.1,
            budgets: vec![2500, 1000, 500, 250, 100],
            monotone_tolerance: 0.05,
            raw_units: false,
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epsilon", self.epsilon),
            ("tau1", self.tau1),
            ("rr_rotation_deg", self.rr_rotation_deg),
            ("rr_translation", self.rr_translation),
            ("ransac_inlier_radius", self.ransac_inlier_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be > 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau2) {
            return Err(Error::invalid("tau2", "must lie in [0, 1]"));
        }
        if self.thresholds.iter().any(|t| !(*t >= 0.0)) || self.thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("thresholds", "must be non-negative and ascending"));
        }
        if self.geodesic_k < 4 {
            return Err(Error::invalid("geodesic_k", "must be >= 4"));
        }
        if self.ransac_iterations == 0 || self.n_keypoints == 0 {
            return Err(Error::invalid("ransac_iterations", "iterations and n_keypoints must be >= 1"));
        }
        if !(self.monotone_tolerance >= 0.0) {
            return Err(Error::invalid("monotone_tolerance", "must be >= 0"));
        }
        Ok(())
    }

    /// Length thresholds for data with `meters_per_unit`; unchanged unless
    /// `raw_units`.
    pub fn in_units(&self, meters_per_unit: f64) -> EvalParams {
        let mut p = self.clone();
        if self.raw_units {
            let k = 1.0 / meters_per_unit;
            p.epsilon *= k;
            p.tau1 *= k;
            p.rr_translation *= k;
            p.ransac_inlier_radius *= k;
            p.thresholds.iter_mut().for_each(|t| *t *= k);
        }
        p
    }
}

/// First index where `values` rises by more than `tolerance` over its
/// predecessor, if any.
pub fn first_rise(values: &[f64], tolerance: f64) -> Option<usize> {
    values.windows(2).position(|w| w[1] > w[0] + tolerance).map(|i| i + 1)
}

/// First index where `values` drops below its predecessor, if any.
pub fn first_drop(values: &[f64]) -> Option<usize> {
    values.windows(2).position(|w| w[1] < w[0]).map(|i| i + 1)
}

/// Which perturbation a repeatability sweep varies.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// Distance thresholds, views unperturbed.
    Threshold(Vec<f64>),
    /// Downsample rates (1 keeps every point).
    Downsample(Vec<f64>),
    /// Gaussian noise sigmas.
    Noise(Vec<f64>),
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Threshold(_) => "threshold",
            Sweep::Downsample(_) => "downsample",
            Sweep::Noise(_) => "noise",
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Sweep::Threshold(v) | Sweep::Downsample(v) | Sweep::Noise(v) => v,
        }
    }
}

/// Mean repeatability over views at one sweep value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub repeatability: f64,
    /// Per-view A->B repeatability.
    pub per_view: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub sweep: &'static str,
    pub points: Vec<SweepPoint>,
    /// Threshold sweeps must not decrease; perturbation sweeps must not
    /// rise by more than the tolerance. `None` when the curve passes.
    pub monotone_violation: Option<usize>,
}

impl SweepReport {
    /// One row per (view, value) and a summary row per value.
    pub fn to_csv(&self) -> String {
        let mut out = format!("view,{},repeatability\n", self.sweep);
        for p in &self.points {
            for (v, r) in p.per_view.iter().enumerate() {
                out.push_str(&format!("{v},{},{r}\n", p.value));
            }
        }
        for p in &self.points {
            out.push_str(&format!("mean,{},{}\n", p.value, p.repeatability));
        }
        out.push_str(&format!(
            "# monotone={}\n",
            self.monotone_violation.map_or("ok".to_string(), |i| format!("violated at {i}"))
        ));
        out
    }
}

/// Repeatability of `detect` under random rigid views of `cloud`.
///
/// The first view is `cloud` itself, detected once. Each other view is
/// `cloud` moved by a random rotation (up to `max_rotation`) and
/// translation (up to `max_translation`), then perturbed as the sweep
/// dictates. Views are not renormalized, so `cloud` should fit in the
/// radius-0.5 ball for the moved copies to stay in the canonical cube.
#[allow(clippy::too_many_arguments)]
pub fn repeatability_sweep<R: Rng + ?Sized>(
    detect: &mut dyn FnMut(&PointCloud) -> Result<Vec<Vec3>>,
    cloud: &PointCloud,
    views: usize,
    sweep: &Sweep,
    params: &EvalParams,
    max_rotation: f64,
    max_translation: f64,
    rng: &mut R,
) -> Result<SweepReport> {
    if views == 0 || sweep.values().is_empty() {
        return Err(Error::invalid("views", "need at least one view and one sweep value"));
    }
    let base = detect(cloud)?;
    let transforms: Vec<RigidTransform> = (0..views)
        .map(|_| random_se3(rng, max_rotation, max_translation))
        .collect::<Result<_>>()?;
    let moved: Vec<PointCloud> = transforms
        .iter()
        .map(|t| PointCloud::new(apply_transform(cloud.points(), t)))
        .collect::<Result<_>>()?;
    // Rows: sweep values, columns: views.
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(sweep.values().len());
    match sweep {
        Sweep::Threshold(eps) => {
            let detected: Vec<Vec<Vec3>> = moved.iter().map(|m| detect(m)).collect::<Result<_>>()?;
            for &e in eps {
                table.push(
                    detected
                        .iter()
                        .zip(&transforms)
                        .map(|(k, t)| relative_repeatability(&base, k, t, e).map(|r| r.fraction))
                        .collect::<Result<_>>()?,
                );
            }
        }
        Sweep::Downsample(values) | Sweep::Noise(values) => {
            for &value in values {
                let mut row = Vec::with_capacity(views);
                for (m, t) in moved.iter().zip(&transforms) {
                    let view = match sweep {
                        Sweep::Downsample(_) => random_downsample(m, value, rng)?,
                        _ => add_gaussian_noise(m, value, rng)?,
                    };
                    let kps = detect(&view)?;
                    row.push(relative_repeatability(&base, &kps, t, params.epsilon)?.fraction);
                }
                table.push(row);
            }
        }
    }
    let out: Vec<SweepPoint> = sweep
        .values()
        .iter()
        .zip(table)
        .map(|(&value, per_view)| SweepPoint {
            value,
            repeatability: per_view.iter().sum::<f64>() / per_view.len() as f64,
            per_view,
        })
        .collect();
    let curve: Vec<f64> = out.iter().map(|p| p.repeatability).collect();
    let monotone_violation = match sweep {
        Sweep::Threshold(_) => first_drop(&curve),
        _ => first_rise(&curve, params.monotone_tolerance),
    };
    Ok(SweepReport {
        sweep: sweep.name(),
        points: out,
        monotone_violation,
    })
}
