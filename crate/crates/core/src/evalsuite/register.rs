//! Two-view registration: descriptor matching, robust rigid fitting and the
//! recall metrics built on them.

use nalgebra::SymmetricEigen;
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, PointCloud, RigidTransform, Vec3};
use crate::inference::{KeypointSet, Provenance};

use super::EvalParams;

/// Finds keypoints on a cloud; `n` is the requested budget.
pub trait Detector {
    fn detect(&mut self, cloud: &PointCloud, n: usize) -> Result<KeypointSet>;
}

impl<F: FnMut(&PointCloud, usize) -> Result<KeypointSet>> Detector for F {
    fn detect(&mut self, cloud: &PointCloud, n: usize) -> Result<KeypointSet> {
        self(cloud, n)
    }
}

/// One fixed-width vector per keypoint.
pub trait Descriptor {
    fn describe(&mut self, cloud: &PointCloud, keypoints: &[Vec3]) -> Result<Vec<Vec<f64>>>;
}

impl<F: FnMut(&PointCloud, &[Vec3]) -> Result<Vec<Vec<f64>>>> Descriptor for F {
    fn describe(&mut self, cloud: &PointCloud, keypoints: &[Vec3]) -> Result<Vec<Vec<f64>>> {
        self(cloud, keypoints)
    }
}

/// `n` distinct input points chosen uniformly, each with saliency `1/n`.
pub fn random_detector<R: Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> Result<KeypointSet> {
    if n > cloud.len() {
        return Err(Error::invalid("n", format!("{n} keypoints requested from {} points", cloud.len())));
    }
    let mut idx = index::sample(rng, cloud.len(), n).into_vec();
    idx.sort_unstable();
    Ok(KeypointSet {
        points: idx.iter().map(|&i| cloud.points()[i]).collect(),
        saliency: vec![1.0 / n.max(1) as f64; n],
        provenance: Provenance {
            after_nms: n,
            ..Provenance::default()
        },
    })
}

/// [`random_detector`] with its own generator; asks for at most the cloud
/// size.
pub struct RandomDetector<R>(pub R);

impl<R: Rng> Detector for RandomDetector<R> {
    fn detect(&mut self, cloud: &PointCloud, n: usize) -> Result<KeypointSet> {
        random_detector(cloud, n.min(cloud.len()), &mut self.0)
    }
}

/// Uniform random vectors; a null model for matching.
pub struct RandomDescriptor<R> {
    pub rng: R,
    pub width: usize,
}

impl<R: Rng> Descriptor for RandomDescriptor<R> {
    fn describe(&mut self, _cloud: &PointCloud, keypoints: &[Vec3]) -> Result<Vec<Vec<f64>>> {
        Ok(keypoints
            .iter()
            .map(|_| (0..self.width).map(|_| self.rng.random::<f64>()).collect())
            .collect())
    }
}

/// Local shape histogram: within `radius` of the keypoint, the distances to
/// it and the angles between the offsets and the local normal, each binned
/// into `bins` and normalized by the neighbor count. Invariant to rigid
/// motion; meant for plumbing, not for accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramDescriptor {
    pub radius: f64,
    pub bins: usize,
}

impl Default for HistogramDescriptor {
    fn default() -> Self {
        Self { radius: 0.15, bins: 8 }
    }
}

fn local_normal(neighbors: &[Vec3]) -> Vec3 {
    let n = neighbors.len() as f64;
    let mean = neighbors.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in neighbors {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let i = eig.eigenvalues.imin();
    eig.eigenvectors.column(i).into_owned()
}

impl Descriptor for HistogramDescriptor {
    fn describe(&mut self, cloud: &PointCloud, keypoints: &[Vec3]) -> Result<Vec<Vec<f64>>> {
        if !(self.radius > 0.0) || self.bins == 0 {
            return Err(Error::invalid("descriptor", "radius must be > 0 and bins >= 1"));
        }
        let r2 = self.radius * self.radius;
        Ok(keypoints
            .iter()
            .map(|k| {
                let near: Vec<Vec3> = cloud.points().iter().filter(|p| (*p - k).norm_squared() <= r2).copied().collect();
                let mut h = vec![0.0; 2 * self.bins];
                if near.len() < 3 {
                    return h;
                }
                let normal = local_normal(&near);
                let w = 1.0 / near.len() as f64;
                for p in &near {
                    let d = p - k;
                    let len = d.norm();
                    let rb = ((len / self.radius) * self.bins as f64).min(self.bins as f64 - 1.0) as usize;
                    h[rb] += w;
                    if len > 0.0 {
                        let c = (d.dot(&normal) / len).abs().min(1.0);
                        let ab = (c * self.bins as f64).min(self.bins as f64 - 1.0) as usize;
                        h[self.bins + ab] += w;
                    }
                }
                h
            })
            .collect())
    }
}

fn nearest_row(q: &[f64], rows: &[Vec<f64>]) -> Option<usize> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (i, r) in rows.iter().enumerate() {
        let d: f64 = q.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = Some(i);
        }
    }
    best
}

/// Mutual nearest neighbors in descriptor space (Euclidean; ties go to the
/// lower index), as `(index in a, index in b)` sorted by `a`.
pub fn match_descriptors(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let width = a.first().or(b.first()).map_or(0, Vec::len);
    if let Some(bad) = a.iter().chain(b).find(|d| d.len() != width) {
        return Err(Error::LengthMismatch {
            what: "descriptor widths",
            left: width,
            right: bad.len(),
        });
    }
    if a.is_empty() || b.is_empty() {
        return Ok(Vec::new());
    }
    let b_to_a: Vec<usize> = b.iter().map(|d| nearest_row(d, a).expect("non-empty")).collect();
    Ok(a.iter()
        .enumerate()
        .filter_map(|(i, d)| {
            let j = nearest_row(d, b).expect("non-empty");
            (b_to_a[j] == i).then_some((i, j))
        })
        .collect())
}

/// Least-squares rigid motion taking `src` onto `dst` (orthogonal
/// Procrustes with reflection correction).
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::invalid("correspondences", format!("need >= 3 pairs, got {}", src.len().min(dst.len()))));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Mat3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    RigidTransform::new(r, cd - r * cs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: RigidTransform,
    /// Indices of correspondences within the inlier radius of the refined
    /// transform.
    pub inliers: Vec<usize>,
}

fn inliers_of(t: &RigidTransform, src: &[Vec3], dst: &[Vec3], radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    (0..src.len()).filter(|&i| (t.apply(&src[i]) - dst[i]).norm_squared() <= r2).collect()
}

/// Best three-point hypothesis by inlier count, refit on its inliers.
pub fn ransac_rigid<R: Rng + ?Sized>(
    src: &[Vec3],
    dst: &[Vec3],
    inlier_radius: f64,
    iterations: usize,
    rng: &mut R,
) -> Result<RansacResult> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            what: "correspondence ends",
            left: src.len(),
            right: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::invalid("correspondences", format!("need >= 3, got {}", src.len())));
    }
    if !(inlier_radius > 0.0) {
        return Err(Error::invalid("inlier_radius", "must be > 0"));
    }
    let mut best: Option<(usize, RigidTransform)> = None;
    for _ in 0..iterations.max(1) {
        let pick = index::sample(rng, src.len(), 3).into_vec();
        let s: Vec<Vec3> = pick.iter().map(|&i| src[i]).collect();
        let d: Vec<Vec3> = pick.iter().map(|&i| dst[i]).collect();
        if (s[1] - s[0]).cross(&(s[2] - s[0])).norm() < 1e-12 {
            continue;
        }
        let Ok(t) = kabsch(&s, &d) else { continue };
        let count = inliers_of(&t, src, dst, inlier_radius).len();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, t));
        }
    }
    let Some((_, mut t)) = best else {
        return Err(Error::DegenerateCloud);
    };
    let mut inliers = inliers_of(&t, src, dst, inlier_radius);
    for _ in 0..2 {
        if inliers.len() < 3 {
            break;
        }
        let s: Vec<Vec3> = inliers.iter().map(|&i| src[i]).collect();
        let d: Vec<Vec3> = inliers.iter().map(|&i| dst[i]).collect();
        let refit = kabsch(&s, &d)?;
        let again = inliers_of(&refit, src, dst, inlier_radius);
        if again.len() < inliers.len() {
            break;
        }
        t = refit;
        inliers = again;
    }
    Ok(RansacResult { transform: t, inliers })
}

/// Two views and the motion taking the first onto the second.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationPair {
    pub a: PointCloud,
    pub b: PointCloud,
    pub transform: RigidTransform,
    /// Meters per unit of the clouds' coordinates; scales raw-unit
    /// thresholds.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDiagnostics {
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub matches: usize,
    pub inlier_ratio: f64,
    pub registered: bool,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationReport {
    /// Pairs whose inlier ratio exceeds `tau2`.
    pub fmr: f64,
    /// Pairs registered within the rotation and translation tolerances.
    pub rr: f64,
    /// Mean inlier ratio over pairs.
    pub inlier_ratio: f64,
    pub pairs: Vec<PairDiagnostics>,
}

impl RegistrationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,keypoints_a,keypoints_b,matches,inlier_ratio,registered,rotation_error_deg,translation_error\n");
        for (i, p) in self.pairs.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{},{},{},{}\n",
                p.keypoints_a, p.keypoints_b, p.matches, p.inlier_ratio, p.registered as u8, p.rotation_error_deg, p.translation_error
            ));
        }
        out.push_str(&format!("# summary fmr={} rr={} inlier_ratio={}\n", self.fmr, self.rr, self.inlier_ratio));
        out
    }
}

/// Detects up to `n_keypoints` per view, describes, matches mutually and
/// scores each pair; RANSAC runs on the matches.
pub fn registration_metrics<R: Rng + ?Sized>(
    pairs: &[RegistrationPair],
    detector: &mut dyn Detector,
    descriptor: &mut dyn Descriptor,
    n_keypoints: usize,
    params: &EvalParams,
    rng: &mut R,
) -> Result<RegistrationReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("pairs", "no registration pairs"));
    }
    let mut diags = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let p = params.in_units(pair.scale);
        let mut ka = detector.detect(&pair.a, n_keypoints)?;
        let mut kb = detector.detect(&pair.b, n_keypoints)?;
        ka.truncate(n_keypoints);
        kb.truncate(n_keypoints);
        let mut diag = PairDiagnostics {
            keypoints_a: ka.len(),
            keypoints_b: kb.len(),
            matches: 0,
            inlier_ratio: 0.0,
            registered: false,
            rotation_error_deg: f64::INFINITY,
            translation_error: f64::INFINITY,
        };
        if !ka.is_empty() && !kb.is_empty() {
            let da = descriptor.describe(&pair.a, &ka.points)?;
            let db = descriptor.describe(&pair.b, &kb.points)?;
            let matches = match_descriptors(&da, &db)?;
            diag.matches = matches.len();
            let src: Vec<Vec3> = matches.iter().map(|&(i, _)| ka.points[i]).collect();
            let dst: Vec<Vec3> = matches.iter().map(|&(_, j)| kb.points[j]).collect();
            if !matches.is_empty() {
                let good = inliers_of(&pair.transform, &src, &dst, p.tau1).len();
                diag.inlier_ratio = good as f64 / matches.len() as f64;
            }
            if matches.len() >= 3 {
                if let Ok(fit) = ransac_rigid(&src, &dst, p.ransac_inlier_radius, p.ransac_iterations, rng) {
                    let delta = fit.transform.compose(&pair.transform.inverse());
                    diag.rotation_error_deg = delta.rotation_angle().to_degrees();
                    diag.translation_error = (fit.transform.translation() - pair.transform.translation()).norm();
                    diag.registered =
                        diag.rotation_error_deg <= p.rr_rotation_deg && diag.translation_error <= p.rr_translation;
                }
            }
        }
        diags.push(diag);
    }
    let n = diags.len() as f64;
    Ok(RegistrationReport {
        fmr: diags.iter().filter(|d| d.inlier_ratio > params.tau2).count() as f64 / n,
        rr: diags.iter().filter(|d| d.registered).count() as f64 / n,
        inlier_ratio: diags.iter().map(|d| d.inlier_ratio).sum::<f64>() / n,
        pairs: diags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, random_se3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect()
    }

    #[test]
    fn kabsch_recovers_exact_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let t = random_se3(&mut rng, 3.1, 0.5).unwrap();
            let src = random_points(&mut rng, 3);
            let dst = apply_transform(&src, &t);
            let fit = kabsch(&src, &dst).unwrap();
            assert!((fit.rotation() - t.rotation()).norm() < 1e-9);
            assert!((fit.translation() - t.translation()).norm() < 1e-9);
        }
    }

    #[test]
    fn ransac_noise_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_se3(&mut rng, 2.0, 0.3).unwrap();
        let src = random_points(&mut rng, 40);
        let dst = apply_transform(&src, &t);
        let fit = ransac_rigid(&src, &dst, 0.01, 50, &mut rng).unwrap();
        assert!(fit.transform.compose(&t.inverse()).rotation_angle() < 1e-3);
        assert_eq!(fit.inliers.len(), 40);
    }

    #[test]
    fn ransac_excludes_planted_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_se3(&mut rng, 2.0, 0.3).unwrap();
        let src = random_points(&mut rng, 60);
        let mut dst = apply_transform(&src, &t);
        let outliers: Vec<usize> = (0..60).step_by(2).collect();
        for &i in &outliers {
            dst[i] += Vec3::from_fn(|_, _| rng.random_range(0.2..0.6));
        }
        let fit = ransac_rigid(&src, &dst, 0.02, 1000, &mut rng).unwrap();
        assert!(fit.inliers.iter().all(|i| i % 2 == 1));
        assert_eq!(fit.inliers.len(), 30);
    }

    #[test]
    fn ransac_needs_three() {
        let p = vec![Vec3::zeros(), Vec3::x()];
        assert!(ransac_rigid(&p, &p, 0.1, 10, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn identical_descriptors_pair_identically() {
        let d: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let m = match_descriptors(&d, &d).unwrap();
        assert_eq!(m, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(match_descriptors(&[], &d).unwrap().is_empty());
        assert!(match_descriptors(&d, &[vec![1.0]]).is_err());
    }

    #[test]
    fn random_detector_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = PointCloud::new(random_points(&mut rng, 50)).unwrap();
        let all = random_detector(&cloud, 50, &mut rng).unwrap();
        assert_eq!(all.points, cloud.points());
        for _ in 0..100 {
            let k = random_detector(&cloud, 7, &mut rng).unwrap();
            assert_eq!(k.len(), 7);
            assert!(k.points.iter().all(|p| cloud.points().contains(p)));
            assert!(k.saliency.iter().all(|&s| s == 1.0 / 7.0));
        }
        let a = random_detector(&cloud, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_detector(&cloud, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(random_detector(&cloud, 51, &mut rng).is_err());
    }

    #[test]
    fn histogram_descriptor_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = PointCloud::new(random_points(&mut rng, 400)).unwrap();
        let t = random_se3(&mut rng, 3.0, 0.2).unwrap();
        let moved = PointCloud::new(apply_transform(cloud.points(), &t)).unwrap();
        let kps = &cloud.points()[..5];
        let mut desc = HistogramDescriptor::default();
        let a = desc.describe(&cloud, kps).unwrap();
        let b = desc.describe(&moved, &apply_transform(kps, &t)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.len(), 16);
            assert!(x.iter().all(|v| v.is_finite()));
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 0.02);
            }
        }
    }
}
