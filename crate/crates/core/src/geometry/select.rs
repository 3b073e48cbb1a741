use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (ties: lower index first); a
/// candidate is dropped when it lies strictly closer than `radius` to one
/// already kept. Returns the kept indices in visiting order.
pub fn nms(candidates: &[Vec3], scores: &[f64], radius: f64) -> Result<Vec<usize>> {
    if candidates.len() != scores.len() {
        return Err(Error::LengthMismatch {
            what: "nms candidates vs scores",
            left: candidates.len(),
            right: scores.len(),
        });
    }
    if !(radius >= 0.0) {
        return Err(Error::invalid("radius", format!("{radius} must be >= 0")));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let r2 = radius * radius;
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let p = &candidates[i];
        if kept.iter().all(|&k| (candidates[k] - p).norm_squared() >= r2) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Index of the cloud point nearest to `q`; ties go to the lower index.
pub fn nearest_index(points: &[Vec3], q: &Vec3) -> Option<usize> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best_d {
            best_d = d;
            best = Some(i);
        }
    }
    best
}

/// Replaces each keypoint by its nearest cloud point.
pub fn snap_to_input(keypoints: &[Vec3], cloud: &PointCloud) -> Result<Vec<Vec3>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(keypoints
        .iter()
        .map(|k| cloud.points()[nearest_index(cloud.points(), k).expect("non-empty")])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_radius_keeps_all_sorted() {
        let pts = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let kept = nms(&pts, &[0.2, 0.9, 0.5], 0.0).unwrap();
        assert_eq!(kept, vec![1, 2, 0]);
    }

    #[test]
    fn close_pair_keeps_best() {
        let pts = vec![Vec3::zeros(), Vec3::new(0.05, 0.0, 0.0)];
        assert_eq!(nms(&pts, &[0.4, 0.6], 0.1).unwrap(), vec![1]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let pts = vec![Vec3::zeros(), Vec3::new(0.01, 0.0, 0.0)];
        assert_eq!(nms(&pts, &[0.5, 0.5], 0.1).unwrap(), vec![0]);
    }

    #[test]
    fn mismatched_lengths() {
        assert!(nms(&[Vec3::zeros()], &[], 0.1).is_err());
    }

    #[test]
    fn snap_picks_nearest_and_lower_on_tie() {
        let cloud = PointCloud::new(vec![Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        let out = snap_to_input(&[Vec3::zeros(), Vec3::new(0.9, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)], &cloud).unwrap();
        assert_eq!(out, vec![cloud.points()[0], cloud.points()[1], cloud.points()[1]]);
    }

    #[test]
    fn snap_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rand_pt = || Vec3::new(rng.random(), rng.random(), rng.random());
        let cloud = PointCloud::new((0..200).map(|_| rand_pt()).collect()).unwrap();
        let kps: Vec<Vec3> = (0..20).map(|_| rand_pt()).collect();
        let snapped = snap_to_input(&kps, &cloud).unwrap();
        for (k, s) in kps.iter().zip(&snapped) {
            let best = cloud
                .points()
                .iter()
                .map(|p| (p - k).norm())
                .fold(f64::INFINITY, f64::min);
            assert_eq!((s - k).norm(), best);
        }
    }
}
