//! Point clouds in the canonical frame, rigid transforms, query lattices,
//! feature volumes and the small selection primitives shared by training
//! and evaluation.

mod perturb;
mod select;
mod transform;
mod volume;

pub use perturb::{add_gaussian_noise, build_query_grids, random_downsample, QueryGrid};
pub use select::{nearest_index, nms, snap_to_input};
pub use transform::{apply_transform, random_se3, RigidTransform};
pub use volume::{trilinear_sample, FeatureVolume, TrilinearStencil};

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Half side of the canonical cube.
pub const CANONICAL_HALF: f64 = 0.5;

/// A finite, non-empty set of 3D points.
///
/// Clouds produced by [`normalize_cloud`] live in the canonical cube
/// `[-0.5, 0.5]^3`. Transformed or noised views may leave it slightly, which
/// is why the cube is checked by [`PointCloud::is_canonical`] rather than at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(index) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when every coordinate lies within the canonical cube grown by `margin`.
    pub fn is_canonical(&self, margin: f64) -> bool {
        self.max_abs_coord() <= CANONICAL_HALF + margin
    }

    pub(crate) fn max_abs_coord(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.amax())
            .fold(0.0, f64::max)
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }
}

/// Parameters mapping a raw cloud onto the canonical frame: `(x - centroid) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub centroid: Vec3,
    pub scale: f64,
}

impl NormParams {
    pub const IDENTITY: NormParams = NormParams {
        centroid: Vec3::new(0.0, 0.0, 0.0),
        scale: 1.0,
    };

    pub fn to_canonical(&self, p: &Vec3) -> Vec3 {
        (p - self.centroid) / self.scale
    }

    pub fn to_raw(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.centroid
    }

    /// Converts a canonical-frame length to raw units.
    pub fn length_to_raw(&self, d: f64) -> f64 {
        d * self.scale
    }
}

/// Centres the bounding box at the origin and scales its longest side to 1.
pub fn normalize_cloud(raw_points: &[Vec3]) -> Result<(PointCloud, NormParams)> {
    let raw = PointCloud::new(raw_points.to_vec())?;
    let (lo, hi) = raw.bounds();
    let scale = (hi - lo).max();
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::DegenerateCloud);
    }
    let params = NormParams {
        centroid: (lo + hi) * 0.5,
        scale,
    };
    let canonical = raw
        .points
        .iter()
        .map(|p| params.to_canonical(p))
        .collect();
    Ok((PointCloud { points: canonical }, params))
}

pub fn denormalize(points: &[Vec3], params: &NormParams) -> Vec<Vec3> {
    points.iter().map(|p| params.to_raw(p)).collect()
}
