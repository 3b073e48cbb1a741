use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit};
use rand::Rng;

use super::{Mat3, Vec3};
use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

/// A proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let error = (rotation.transpose() * rotation - Mat3::identity()).amax();
        let det = rotation.determinant();
        if !(error <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL * 10.0) {
            return Err(Error::NotOrthonormal {
                error: error.max((det - 1.0).abs()),
            });
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation", "non-finite component"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rotation = match Unit::try_new(axis, 1e-12) {
            Some(axis) => Rotation3::from_axis_angle(&axis, angle).into_inner(),
            None => Mat3::identity(),
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Row-major `[R | t]` as 12 numbers.
    #[rustfmt::skip]
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let rotation = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(rotation, Vec3::new(v[3], v[7], v[11]))
    }
}

pub(crate) fn rotation_angle(r: &Mat3) -> f64 {
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

pub fn apply_transform(points: &[Vec3], transform: &RigidTransform) -> Vec<Vec3> {
    points.iter().map(|p| transform.apply(p)).collect()
}

/// Samples a rigid motion whose rotation follows the Haar measure on SO(3)
/// restricted to angles `<= max_angle`, with translation uniform in the ball
/// of radius `max_translation`.
pub fn random_se3<R: Rng + ?Sized>(
    rng: &mut R,
    max_angle: f64,
    max_translation: f64,
) -> Result<RigidTransform> {
    if !(max_angle >= 0.0 && max_angle <= PI) {
        return Err(Error::invalid("max_angle", format!("{max_angle} not in [0, pi]")));
    }
    if !(max_translation >= 0.0 && max_translation.is_finite()) {
        return Err(Error::invalid(
            "max_translation",
            format!("{max_translation} is negative or non-finite"),
        ));
    }
    // Haar angle density is (1 - cos a) / pi; invert its CDF a - sin a.
    let u: f64 = rng.random();
    let target = u * (max_angle - max_angle.sin());
    let (mut lo, mut hi) = (0.0, max_angle);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mid - mid.sin() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let angle = 0.5 * (lo + hi);
    let axis = unit_vector(rng);
    let radius = max_translation * rng.random::<f64>().cbrt();
    let translation = unit_vector(rng) * radius;
    Ok(RigidTransform::from_axis_angle(axis, angle, translation))
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_keeps_points() {
        let pts = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 4.0, 2.0)];
        assert_eq!(apply_transform(&pts, &RigidTransform::identity()), pts);
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_axis_angle(Vec3::z(), PI / 2.0, Vec3::zeros());
        let y = t.apply(&Vec3::x());
        assert!((y - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn rejects_non_orthonormal() {
        let m = Mat3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(m, Vec3::zeros()).is_err());
        let reflect = Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn compose_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_se3(&mut rng, PI, 0.3).unwrap();
        let b = random_se3(&mut rng, PI, 0.3).unwrap();
        let p = Vec3::new(0.3, -0.1, 0.25);
        assert!((a.compose(&b).apply(&p) - a.apply(&b.apply(&p))).norm() < 1e-12);
        assert!((a.inverse().apply(&a.apply(&p)) - p).norm() < 1e-12);
        assert!(RigidTransform::new(*a.compose(&b).rotation(), Vec3::zeros()).is_ok());
    }

    #[test]
    fn isometry_on_random_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..40)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5))
            .collect();
        let t = random_se3(&mut rng, PI, 1.0).unwrap();
        let moved = apply_transform(&pts, &t);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d0 = (pts[i] - pts[j]).norm();
                let d1 = (moved[i] - moved[j]).norm();
                assert!((d0 - d1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn small_range_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = random_se3(&mut rng, 1e-9, 0.0).unwrap();
        assert!(t.rotation_angle() <= 1e-9 + 1e-12);
        assert_eq!(*t.translation(), Vec3::zeros());
    }

    #[test]
    fn seeded_determinism() {
        let a = random_se3(&mut ChaCha8Rng::seed_from_u64(42), 1.0, 0.2).unwrap();
        let b = random_se3(&mut ChaCha8Rng::seed_from_u64(42), 1.0, 0.2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_se3(&mut rng, -0.1, 0.0).is_err());
        assert_eq!(random_se3(&mut rng, 0.0, 0.0).unwrap().rotation_angle(), 0.0);
        assert!(random_se3(&mut rng, 4.0, 0.0).is_err());
        assert!(random_se3(&mut rng, 1.0, -1.0).is_err());
    }

    #[test]
    fn translation_stays_in_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let t = random_se3(&mut rng, PI, 0.25).unwrap();
            assert!(t.translation().norm() <= 0.25 + 1e-12);
            assert!(t.rotation_angle() <= PI);
        }
    }

    /// Angle histogram of full-range samples against the Haar density
    /// `(1 - cos a) / pi`, bin probabilities integrated in closed form.
    #[test]
    fn full_range_matches_haar_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let bins = 12;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let t = random_se3(&mut rng, PI, 0.0).unwrap();
            // angle recovered from the matrix trace, independent of the sampler
            let a = rotation_angle(t.rotation());
            counts[((a / PI * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let cdf = |a: f64| (a - a.sin()) / PI;
        for (b, &c) in counts.iter().enumerate() {
            let lo = PI * b as f64 / bins as f64;
            let hi = PI * (b + 1) as f64 / bins as f64;
            let p = cdf(hi) - cdf(lo);
            let mean = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma,
                "bin {b}: {c} vs {mean:.1} ± {sigma:.1}"
            );
        }
    }
}
