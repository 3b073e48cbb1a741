//! Keypoint extraction by gradient ascent on the saliency field, surface
//! reconstruction and field slices.

mod mesh;
mod slice;

use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::field_model::{FieldModel, Heads, EVAL_CHUNK};
use crate::geometry::{nms, snap_to_input, FeatureVolume, NormParams, PointCloud, Vec3, CANONICAL_HALF};

pub use mesh::{marching_cubes, Lattice, SurfaceMesh};
pub use slice::{slice_field, Axis, FieldImage, FieldKind, SliceMode};

/// Default isovalue for surface reconstruction.
pub const DEFAULT_ISO: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractParams {
    /// Step size of each refinement update.
    pub lambda: f64,
    /// Refinement steps `J`.
    pub iterations: usize,
    /// Candidates need occupancy above `1 - thr_o`.
    pub thr_o: f64,
    /// Keypoints need saliency above `thr_s`.
    pub thr_s: f64,
    /// Candidate lattice; `None` uses the feature-volume resolution.
    pub infer_grid_resolution: Option<[usize; 3]>,
    pub nms_radius: f64,
    pub max_keypoints: Option<usize>,
    pub snap_to_input: bool,
    /// `nms_radius` is in raw units and converted per cloud.
    pub raw_units: bool,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            iterations: 10,
            thr_o: 0.5,
            thr_s: 0.7,
            infer_grid_resolution: None,
            nms_radius: 0.1,
            max_keypoints: None,
            snap_to_input: false,
            raw_units: false,
        }
    }
}

impl ExtractParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", format!("{} must be > 0", self.lambda)));
        }
        if !(self.thr_s > 0.0 && self.thr_s < 1.0) {
            return Err(Error::invalid("thr_s", format!("{} outside (0, 1)", self.thr_s)));
        }
        if !(self.thr_o > 0.0 && self.thr_o <= 0.5) {
            return Err(Error::invalid("thr_o", format!("{} outside (0, 0.5]", self.thr_o)));
        }
        if !(self.nms_radius >= 0.0) {
            return Err(Error::invalid("nms_radius", "must be >= 0"));
        }
        if let Some(r) = self.infer_grid_resolution {
            if r.iter().any(|&n| n < 2) {
                return Err(Error::invalid("infer_grid_resolution", "every axis needs >= 2"));
            }
        }
        Ok(())
    }

    /// Suppression radius in the canonical frame of a cloud normalized
    /// with `norm`.
    pub fn canonical_nms_radius(&self, norm: &NormParams) -> f64 {
        if self.raw_units {
            self.nms_radius / norm.scale
        } else {
            self.nms_radius
        }
    }
}

/// How an extraction went, stage by stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub lattice: usize,
    /// Candidates passing the occupancy filter.
    pub occupied: usize,
    /// Refined candidates passing the saliency threshold.
    pub salient: usize,
    pub after_nms: usize,
    pub iterations: usize,
    /// Why the set is empty, when it is.
    pub diagnostic: Option<String>,
}

/// Keypoints in the canonical frame, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointSet {
    pub points: Vec<Vec3>,
    pub saliency: Vec<f64>,
    pub provenance: Provenance,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the `n` best.
    pub fn truncate(&mut self, n: usize) {
        self.points.truncate(n);
        self.saliency.truncate(n);
    }

    /// `x y z saliency` per line in raw coordinates, after a `#` header.
    pub fn to_text(&self, norm: &NormParams, params: &ExtractParams) -> String {
        let mut out = format!(
            "# keypoints={} lambda={} iterations={} thr_o={} thr_s={} nms_radius={} snap={}\n",
            self.len(),
            params.lambda,
            params.iterations,
            params.thr_o,
            params.thr_s,
            params.nms_radius,
            params.snap_to_input
        );
        for (p, s) in self.points.iter().zip(&self.saliency) {
            let r = norm.to_raw(p);
            let _ = writeln!(out, "{} {} {} {s}", r.x, r.y, r.z);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>, norm: &NormParams, params: &ExtractParams) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text(norm, params).as_bytes())
    }
}

/// Mean of `1 - saliency` over `queries`.
pub fn saliency_energy(model: &FieldModel, volume: &FeatureVolume, queries: &[Vec3]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("queries", "saliency energy of an empty query set"));
    }
    let (_, sal) = model.query_volume(volume, queries, Heads::SALIENCY)?;
    Ok(sal.iter().map(|s| 1.0 - s).sum::<f64>() / queries.len() as f64)
}

/// Saliency and its gradient with respect to each query coordinate.
pub fn saliency_with_gradient(
    model: &FieldModel,
    volume: &FeatureVolume,
    queries: &[Vec3],
) -> Result<(Vec<f64>, Vec<Vec3>)> {
    let mut sal = Vec::with_capacity(queries.len());
    let mut grad = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(EVAL_CHUNK) {
        let trace = model.query_traced(volume, chunk, Heads::SALIENCY)?;
        let ones = vec![1.0; chunk.len()];
        let g = model
            .query_backward(volume, &trace, None, Some(&ones), None, None, true)
            .expect("query gradient requested");
        sal.extend_from_slice(&trace.saliency);
        grad.extend(g);
    }
    Ok((sal, grad))
}

/// Energy and its gradient with respect to every query.
pub fn saliency_energy_grad(model: &FieldModel, volume: &FeatureVolume, queries: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    if queries.is_empty() {
        return Err(Error::invalid("queries", "saliency energy of an empty query set"));
    }
    let (sal, g) = saliency_with_gradient(model, volume, queries)?;
    let n = queries.len() as f64;
    let e = sal.iter().map(|s| 1.0 - s).sum::<f64>() / n;
    Ok((e, g.into_iter().map(|d| -d / n).collect()))
}

/// `iterations` fixed steps `q <- q + lambda * grad saliency(q)`, each query
/// on its own and clamped to the canonical cube.
pub fn refine_queries(
    model: &FieldModel,
    volume: &FeatureVolume,
    queries: &[Vec3],
    lambda: f64,
    iterations: usize,
) -> Result<Vec<Vec3>> {
    let mut q = queries.to_vec();
    if q.is_empty() {
        return Ok(q);
    }
    for _ in 0..iterations {
        let (_, g) = saliency_with_gradient(model, volume, &q)?;
        for (p, d) in q.iter_mut().zip(g) {
            *p = (*p + d * lambda).map(|c| c.clamp(-CANONICAL_HALF, CANONICAL_HALF));
        }
    }
    Ok(q)
}

/// Uniform lattice over the canonical cube.
pub fn canonical_lattice(resolution: [usize; 3]) -> Vec<Vec3> {
    let c = |i: usize, n: usize| -CANONICAL_HALF + 2.0 * CANONICAL_HALF * i as f64 / (n - 1) as f64;
    let [nx, ny, nz] = resolution;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                out.push(Vec3::new(c(i, nx), c(j, ny), c(k, nz)));
            }
        }
    }
    out
}

/// Encodes `cloud` (canonical frame) and extracts its keypoints.
pub fn extract_keypoints(model: &FieldModel, cloud: &PointCloud, params: &ExtractParams) -> Result<KeypointSet> {
    let volume = model.encode(cloud)?;
    extract_from_volume(model, &volume, cloud, params)
}

/// Extraction on an already encoded cloud. `params.nms_radius` is taken
/// as canonical; convert raw radii with
/// [`ExtractParams::canonical_nms_radius`] first.
pub fn extract_from_volume(
    model: &FieldModel,
    volume: &FeatureVolume,
    cloud: &PointCloud,
    params: &ExtractParams,
) -> Result<KeypointSet> {
    params.validate()?;
    let res = params.infer_grid_resolution.unwrap_or(model.config().volume_resolution);
    let lattice = canonical_lattice(res);
    let mut prov = Provenance {
        lattice: lattice.len(),
        iterations: params.iterations,
        ..Provenance::default()
    };
    let (occ, _) = model.query_volume(volume, &lattice, Heads::OCCUPANCY)?;
    let candidates: Vec<Vec3> = lattice
        .iter()
        .zip(&occ)
        .filter(|(_, &o)| o > 1.0 - params.thr_o)
        .map(|(q, _)| *q)
        .collect();
    prov.occupied = candidates.len();
    if candidates.is_empty() {
        prov.diagnostic = Some(format!("no lattice point has occupancy above {}", 1.0 - params.thr_o));
        return Ok(KeypointSet {
            provenance: prov,
            ..KeypointSet::default()
        });
    }
    let refined = refine_queries(model, volume, &candidates, params.lambda, params.iterations)?;
    let (_, sal) = model.query_volume(volume, &refined, Heads::SALIENCY)?;
    let (mut pts, mut scores): (Vec<Vec3>, Vec<f64>) =
        refined.into_iter().zip(sal).filter(|(_, s)| *s > params.thr_s).unzip();
    prov.salient = pts.len();
    if pts.is_empty() {
        prov.diagnostic = Some(format!("no refined candidate has saliency above {}", params.thr_s));
        return Ok(KeypointSet {
            provenance: prov,
            ..KeypointSet::default()
        });
    }
    let mut keep = nms(&pts, &scores, params.nms_radius)?;
    pts = keep.iter().map(|&i| pts[i]).collect();
    scores = keep.iter().map(|&i| scores[i]).collect();
    if params.snap_to_input {
        // Snapping can pull two survivors onto nearby input points, so the
        // radius is enforced again.
        pts = snap_to_input(&pts, cloud)?;
        keep = nms(&pts, &scores, params.nms_radius)?;
        pts = keep.iter().map(|&i| pts[i]).collect();
        scores = keep.iter().map(|&i| scores[i]).collect();
    }
    prov.after_nms = pts.len();
    let mut set = KeypointSet {
        points: pts,
        saliency: scores,
        provenance: prov,
    };
    if let Some(n) = params.max_keypoints {
        set.truncate(n);
    }
    Ok(set)
}

/// Occupancy on a `resolution`-per-axis lattice over the canonical cube,
/// meshed at `iso`.
pub fn reconstruct_surface(model: &FieldModel, cloud: &PointCloud, iso: f64, resolution: usize) -> Result<SurfaceMesh> {
    if resolution < 2 {
        return Err(Error::invalid("resolution", "must be >= 2"));
    }
    let volume = model.encode(cloud)?;
    let (occ, _) = model.query_volume(&volume, &canonical_lattice([resolution; 3]), Heads::OCCUPANCY)?;
    let spacing = 2.0 * CANONICAL_HALF / (resolution - 1) as f64;
    Ok(marching_cubes(
        &Lattice {
            values: &occ,
            dims: [resolution; 3],
            origin: Vec3::repeat(-CANONICAL_HALF),
            spacing: Vec3::repeat(spacing),
        },
        iso,
    ))
}

/// Central slice or maximum projection of one head along `axis`.
pub fn field_slice(
    model: &FieldModel,
    cloud: &PointCloud,
    field: FieldKind,
    axis: Axis,
    mode: SliceMode,
    resolution: usize,
) -> Result<FieldImage> {
    let volume = model.encode(cloud)?;
    let heads = match field {
        FieldKind::Occupancy => Heads::OCCUPANCY,
        FieldKind::Saliency => Heads::SALIENCY,
    };
    let mut eval = |q: &[Vec3]| -> Result<Vec<f64>> {
        let (o, s) = model.query_volume(&volume, q, heads)?;
        Ok(if field == FieldKind::Occupancy { o } else { s })
    };
    slice_field(&mut eval, axis, mode, resolution)
}
