//! Analytic test shapes sampled uniformly on their surface, with exact
//! signed-distance and corner ground truth.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Sphere { radius: f64 },
    /// Axis-aligned box shell centered at the origin; `size` is the full
    /// edge length per axis.
    Box { size: [f64; 3] },
    /// Closed cylinder along z.
    Cylinder { radius: f64, height: f64 },
    /// L-shaped profile in the xy plane (legs `width` long and `thickness`
    /// thick) extruded `depth` along z, centered on its bounding box.
    LBracket { width: f64, thickness: f64, depth: f64 },
    /// Two disjoint boxes, the second one turned about z.
    TwoBox,
}

pub const SHAPE_NAMES: [&str; 5] = ["sphere", "box", "cylinder", "l-bracket", "two-box"];

impl FromStr for ShapeKind {
    type Err = Error;

    /// Parses a shape name into its default size.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sphere" => ShapeKind::Sphere { radius: 0.35 },
            "box" => ShapeKind::Box { size: [0.5, 0.4, 0.3] },
            "cylinder" => ShapeKind::Cylinder {
                radius: 0.25,
                height: 0.5,
            },
            "l-bracket" => ShapeKind::LBracket {
                width: 0.6,
                thickness: 0.2,
                depth: 0.3,
            },
            "two-box" => ShapeKind::TwoBox,
            other => {
                return Err(Error::invalid(
                    "kind",
                    format!("unknown shape `{other}` (expected one of {})", SHAPE_NAMES.join(", ")),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticShapeSpec {
    pub kind: ShapeKind,
    pub n_points: usize,
    pub seed: u64,
}

/// A box placed by a rigid transform (identity for axis-aligned ones).
#[derive(Debug, Clone, PartialEq)]
struct PlacedBox {
    half: Vec3,
    pose: RigidTransform,
}

impl PlacedBox {
    fn sdf(&self, p: &Vec3) -> f64 {
        let local = self.pose.inverse().apply(p);
        let q = local.abs() - self.half;
        q.map(|x| x.max(0.0)).norm() + q.max().min(0.0)
    }

    fn corners(&self) -> Vec<Vec3> {
        (0..8)
            .map(|i| {
                let s = |b: usize| if i >> b & 1 == 1 { 1.0 } else { -1.0 };
                self.pose.apply(&Vec3::new(s(0) * self.half.x, s(1) * self.half.y, s(2) * self.half.z))
            })
            .collect()
    }
}

/// Planar parallelogram patch `o + a u + b v`, `a, b` in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
struct Patch {
    o: Vec3,
    u: Vec3,
    v: Vec3,
}

impl Patch {
    fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }
}

fn box_patches(half: Vec3) -> Vec<Patch> {
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut u = Vec3::zeros();
        let mut v = Vec3::zeros();
        u[a] = 2.0 * half[a];
        v[b] = 2.0 * half[b];
        for sign in [-1.0, 1.0] {
            let mut o = -half;
            o[axis] = sign * half[axis];
            out.push(Patch { o, u, v });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShape {
    pub kind: ShapeKind,
    pub cloud: PointCloud,
    /// Polyhedral corners; empty for curved shapes.
    pub corners: Vec<Vec3>,
    boxes: Vec<PlacedBox>,
}

impl SyntheticShape {
    /// Negative inside, positive outside, zero on the surface. Exact for
    /// the sphere, boxes and cylinder; for the unions (L-bracket, two-box
    /// scene) it is exact on and outside the surface near it and a lower
    /// bound on the distance elsewhere.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match self.kind {
            ShapeKind::Sphere { radius } => p.norm() - radius,
            ShapeKind::Cylinder { radius, height } => {
                let d = Vec3::new((p.x * p.x + p.y * p.y).sqrt() - radius, p.z.abs() - height / 2.0, 0.0);
                d.x.max(d.y).min(0.0) + Vec3::new(d.x.max(0.0), d.y.max(0.0), 0.0).norm()
            }
            _ => self.boxes.iter().map(|b| b.sdf(p)).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn on_surface(&self, p: &Vec3, tolerance: f64) -> bool {
        self.signed_distance(p).abs() <= tolerance
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("{v} must be positive")))
    }
}

pub fn generate_synthetic(spec: &SyntheticShapeSpec) -> Result<SyntheticShape> {
    if spec.n_points == 0 {
        return Err(Error::invalid("n_points", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut boxes = Vec::new();
    let mut corners = Vec::new();
    let points: Vec<Vec3> = match spec.kind {
        ShapeKind::Sphere { radius } => {
            positive("radius", radius)?;
            (0..spec.n_points)
                .map(|_| loop {
                    let g = Vec3::new(
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                    );
                    let n = g.norm();
                    if n > 1e-12 {
                        break g * (radius / n);
                    }
                })
                .collect()
        }
        ShapeKind::Cylinder { radius, height } => {
            positive("radius", radius)?;
            positive("height", height)?;
            let side = 2.0 * PI * radius * height;
            let cap = PI * radius * radius;
            let pick = WeightedIndex::new([side, cap, cap]).expect("positive areas");
            (0..spec.n_points)
                .map(|_| {
                    let theta = rng.random_range(0.0..2.0 * PI);
                    match pick.sample(&mut rng) {
                        0 => Vec3::new(radius * theta.cos(), radius * theta.sin(), rng.random_range(-0.5..=0.5) * height),
                        k => {
                            let r = radius * rng.random::<f64>().sqrt();
                            let z = if k == 1 { height / 2.0 } else { -height / 2.0 };
                            Vec3::new(r * theta.cos(), r * theta.sin(), z)
                        }
                    }
                })
                .collect()
        }
        ShapeKind::Box { size } => {
            for (i, s) in size.iter().enumerate() {
                positive(["size.x", "size.y", "size.z"][i], *s)?;
            }
            let b = PlacedBox {
                half: Vec3::from(size) / 2.0,
                pose: RigidTransform::identity(),
            };
            let patches = box_patches(b.half);
            corners = b.corners();
            boxes.push(b);
            sample_patches(&patches, &RigidTransform::identity(), spec.n_points, &mut rng)
        }
        ShapeKind::LBracket { width, thickness, depth } => {
            positive("width", width)?;
            positive("thickness", thickness)?;
            positive("depth", depth)?;
            if thickness >= width {
                return Err(Error::invalid("thickness", "must be smaller than width"));
            }
            let (w, t, dz) = (width, thickness, depth / 2.0);
            let c = w / 2.0;
            let profile = [(0.0, 0.0), (w, 0.0), (w, t), (t, t), (t, w), (0.0, w)];
            let at = |(x, y): (f64, f64), z: f64| Vec3::new(x - c, y - c, z);
            let mut patches = Vec::new();
            for z in [-dz, dz] {
                patches.push(Patch {
                    o: at((0.0, 0.0), z),
                    u: Vec3::new(w, 0.0, 0.0),
                    v: Vec3::new(0.0, t, 0.0),
                });
                patches.push(Patch {
                    o: at((0.0, t), z),
                    u: Vec3::new(t, 0.0, 0.0),
                    v: Vec3::new(0.0, w - t, 0.0),
                });
            }
            for i in 0..6 {
                let a = profile[i];
                let b = profile[(i + 1) % 6];
                patches.push(Patch {
                    o: at(a, -dz),
                    u: Vec3::new(b.0 - a.0, b.1 - a.1, 0.0),
                    v: Vec3::new(0.0, 0.0, 2.0 * dz),
                });
            }
            for z in [-dz, dz] {
                corners.extend(profile.iter().map(|&q| at(q, z)));
            }
            boxes.push(PlacedBox {
                half: Vec3::new(w / 2.0, t / 2.0, dz),
                pose: RigidTransform::new(crate::geometry::Mat3::identity(), Vec3::new(0.0, t / 2.0 - c, 0.0))?,
            });
            boxes.push(PlacedBox {
                half: Vec3::new(t / 2.0, w / 2.0, dz),
                pose: RigidTransform::new(crate::geometry::Mat3::identity(), Vec3::new(t / 2.0 - c, 0.0, 0.0))?,
            });
            sample_patches(&patches, &RigidTransform::identity(), spec.n_points, &mut rng)
        }
        ShapeKind::TwoBox => {
            boxes.push(PlacedBox {
                half: Vec3::new(0.15, 0.1, 0.1),
                pose: RigidTransform::from_axis_angle(Vec3::z(), 0.0, Vec3::new(-0.22, -0.05, 0.0)),
            });
            boxes.push(PlacedBox {
                half: Vec3::new(0.1, 0.15, 0.075),
                pose: RigidTransform::from_axis_angle(Vec3::z(), 0.4, Vec3::new(0.2, 0.08, 0.02)),
            });
            let areas: Vec<f64> = boxes
                .iter()
                .map(|b| box_patches(b.half).iter().map(Patch::area).sum())
                .collect();
            let pick = WeightedIndex::new(&areas).expect("positive areas");
            let mut counts = [0usize; 2];
            for _ in 0..spec.n_points {
                counts[pick.sample(&mut rng)] += 1;
            }
            let mut pts = Vec::with_capacity(spec.n_points);
            for (b, &n) in boxes.iter().zip(&counts) {
                pts.extend(sample_patches(&box_patches(b.half), &b.pose, n, &mut rng));
                corners.extend(b.corners());
            }
            pts
        }
    };
    Ok(SyntheticShape {
        kind: spec.kind,
        cloud: PointCloud::new(points)?,
        corners,
        boxes,
    })
}

fn sample_patches<R: Rng + ?Sized>(patches: &[Patch], pose: &RigidTransform, n: usize, rng: &mut R) -> Vec<Vec3> {
    let pick = WeightedIndex::new(patches.iter().map(Patch::area)).expect("positive areas");
    (0..n)
        .map(|_| {
            let p = patches[pick.sample(rng)];
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            pose.apply(&(p.o + p.u * a + p.v * b))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make(name: &str, n: usize, seed: u64) -> SyntheticShape {
        generate_synthetic(&SyntheticShapeSpec {
            kind: name.parse().unwrap(),
            n_points: n,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn sphere_samples_lie_on_radius() {
        let s = make("sphere", 2048, 3);
        assert_eq!(s.cloud.len(), 2048);
        for p in s.cloud.points() {
            assert!((p.norm() - 0.35).abs() < 1e-9);
        }
    }

    #[test]
    fn box_corners_are_analytic() {
        let s = make("box", 100, 0);
        assert_eq!(s.corners.len(), 8);
        for c in &s.corners {
            assert_eq!((c.x.abs(), c.y.abs(), c.z.abs()), (0.25, 0.2, 0.15));
            assert!(s.on_surface(c, 1e-12));
        }
        let mut uniq = s.corners.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
    }

    #[test]
    fn corner_counts() {
        assert_eq!(make("l-bracket", 10, 0).corners.len(), 12);
        assert_eq!(make("two-box", 10, 0).corners.len(), 16);
        assert!(make("cylinder", 10, 0).corners.is_empty());
    }

    #[test]
    fn every_sample_is_on_surface() {
        for name in SHAPE_NAMES {
            let s = make(name, 3000, 11);
            for p in s.cloud.points() {
                assert!(s.on_surface(p, 1e-9), "{name} {p:?} {}", s.signed_distance(p));
            }
            assert!(s.signed_distance(&Vec3::new(0.9, 0.9, 0.9)) > 0.0, "{name}");
        }
    }

    #[test]
    fn interior_is_negative() {
        assert!(make("sphere", 10, 0).signed_distance(&Vec3::zeros()) < 0.0);
        assert!(make("box", 10, 0).signed_distance(&Vec3::zeros()) < 0.0);
        assert!(make("cylinder", 10, 0).signed_distance(&Vec3::zeros()) < 0.0);
        let l = make("l-bracket", 10, 0);
        assert!(l.signed_distance(&Vec3::new(-0.2, -0.2, 0.0)) < 0.0);
        assert!(l.signed_distance(&Vec3::new(0.1, 0.1, 0.0)) > 0.0);
    }

    #[test]
    fn seeded_and_deterministic() {
        assert_eq!(make("two-box", 500, 9), make("two-box", 500, 9));
        assert_ne!(make("two-box", 500, 9), make("two-box", 500, 10));
    }

    #[test]
    fn sphere_octants_are_balanced() {
        let n = 10_000;
        let s = make("sphere", n, 21);
        let mut counts = [0usize; 8];
        for p in s.cloud.points() {
            let o = (p.x > 0.0) as usize | ((p.y > 0.0) as usize) << 1 | ((p.z > 0.0) as usize) << 2;
            counts[o] += 1;
        }
        let mean = n as f64 / 8.0;
        let sigma = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn box_faces_sampled_by_area() {
        let n = 20_000;
        let s = make("box", n, 5);
        let total = 2.0 * (0.5 * 0.4 + 0.4 * 0.3 + 0.5 * 0.3);
        let x_faces = s.cloud.points().iter().filter(|p| p.x.abs() == 0.25).count() as f64;
        let p = 2.0 * 0.4 * 0.3 / total;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((x_faces - n as f64 * p).abs() <= 4.0 * sigma);
    }

    #[test]
    fn invalid_specs() {
        let bad = |kind| generate_synthetic(&SyntheticShapeSpec { kind, n_points: 10, seed: 0 }).is_err();
        assert!(bad(ShapeKind::Sphere { radius: 0.0 }));
        assert!(bad(ShapeKind::Box { size: [0.1, -0.1, 0.1] }));
        assert!(bad(ShapeKind::LBracket {
            width: 0.2,
            thickness: 0.3,
            depth: 0.1
        }));
        assert!(generate_synthetic(&SyntheticShapeSpec {
            kind: ShapeKind::TwoBox,
            n_points: 0,
            seed: 0
        })
        .is_err());
        assert!("torus".parse::<ShapeKind>().is_err());
    }
}
