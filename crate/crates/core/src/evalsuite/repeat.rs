//! Relative repeatability of keypoints across two views.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};

/// Uniform hash grid for fixed-radius neighbor tests.
pub(crate) struct SpatialHash<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> SpatialHash<'a> {
    pub(crate) fn new(points: &'a [Vec3], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    fn key(p: &Vec3, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    /// Whether any point lies within `radius` (<= the cell size) of `q`.
    pub(crate) fn any_within(&self, q: &Vec3, radius: f64) -> bool {
        debug_assert!(radius <= self.cell);
        let [x, y, z] = Self::key(q, self.cell);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&[x + dx, y + dy, z + dz]) {
                        if ids.iter().any(|&i| (self.points[i] - q).norm_squared() <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Repeatability {
    /// `repeatable / total`, or 0 when `total` is 0.
    pub fraction: f64,
    pub repeatable: usize,
    pub total: usize,
}

impl Repeatability {
    /// The first view had no keypoints.
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// Fraction of `a` whose image under `t` (frame A to frame B) has a
/// keypoint of `b` within `epsilon`.
pub fn relative_repeatability(a: &[Vec3], b: &[Vec3], t: &RigidTransform, epsilon: f64) -> Result<Repeatability> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("epsilon", format!("{epsilon} must be > 0")));
    }
    let hash = SpatialHash::new(b, epsilon);
    let repeatable = a.iter().filter(|p| hash.any_within(&t.apply(p), epsilon)).count();
    Ok(Repeatability {
        fraction: if a.is_empty() { 0.0 } else { repeatable as f64 / a.len() as f64 },
        repeatable,
        total: a.len(),
    })
}

/// Repeatability in both directions and their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRepeatability {
    pub a_to_b: Repeatability,
    pub b_to_a: Repeatability,
    pub mean: f64,
}

pub fn pair_repeatability(a: &[Vec3], b: &[Vec3], t: &RigidTransform, epsilon: f64) -> Result<PairRepeatability> {
    let a_to_b = relative_repeatability(a, b, t, epsilon)?;
    let b_to_a = relative_repeatability(b, a, &t.inverse(), epsilon)?;
    Ok(PairRepeatability {
        a_to_b,
        b_to_a,
        mean: 0.5 * (a_to_b.fraction + b_to_a.fraction),
    })
}

/// A->B repeatability at each threshold.
pub fn repeatability_curve(a: &[Vec3], b: &[Vec3], t: &RigidTransform, thresholds: &[f64]) -> Result<Vec<f64>> {
    thresholds
        .iter()
        .map(|&e| relative_repeatability(a, b, t, e).map(|r| r.fraction))
        .collect()
}
