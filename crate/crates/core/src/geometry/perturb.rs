use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

/// Keeps a uniformly chosen subset of `floor(N / rate)` points, in input order.
pub fn random_downsample<R: Rng + ?Sized>(
    cloud: &PointCloud,
    rate: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if !(rate >= 1.0) || !rate.is_finite() {
        return Err(Error::invalid("rate", format!("{rate} must be >= 1")));
    }
    let n = cloud.len();
    let keep = (n as f64 / rate).floor() as usize;
    if keep == 0 {
        return Err(Error::invalid(
            "rate",
            format!("{rate} leaves no points out of {n}"),
        ));
    }
    if keep == n {
        return Ok(cloud.clone());
    }
    let mut picked = index::sample(rng, n, keep).into_vec();
    picked.sort_unstable();
    let points = picked.into_iter().map(|i| cloud.points()[i]).collect();
    PointCloud::new(points)
}

/// Perturbs every coordinate with i.i.d. `N(0, sigma^2)` noise. Points are
/// not pulled back into the canonical cube.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    cloud: &PointCloud,
    sigma: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("sigma", format!("{sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid("sigma", e.to_string()))?;
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            Vec3::new(
                p.x + normal.sample(rng),
                p.y + normal.sample(rng),
                p.z + normal.sample(rng),
            )
        })
        .collect();
    PointCloud::new(points)
}

/// A local cubic lattice of side `extent` centred on an input point.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGrid {
    pub center: Vec3,
    pub extent: f64,
    pub resolution: [usize; 3],
    pub points: Vec<Vec3>,
}

impl QueryGrid {
    pub fn new(center: Vec3, extent: f64, resolution: [usize; 3]) -> Result<Self> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::invalid(
                "resolution",
                format!("{resolution:?}: every axis needs >= 2 samples"),
            ));
        }
        if !(extent > 0.0) {
            return Err(Error::invalid("extent", format!("{extent} must be > 0")));
        }
        let step = |a: usize| extent / (resolution[a] - 1) as f64;
        let start = center - Vec3::repeat(extent * 0.5);
        let mut points = Vec::with_capacity(resolution.iter().product());
        for i in 0..resolution[0] {
            for j in 0..resolution[1] {
                for k in 0..resolution[2] {
                    points.push(
                        start + Vec3::new(i as f64 * step(0), j as f64 * step(1), k as f64 * step(2)),
                    );
                }
            }
        }
        Ok(Self {
            center,
            extent,
            resolution,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Builds `n` lattices of side `1/grid_scale`, centred on input points drawn
/// without replacement (with replacement once `n` exceeds the cloud size).
pub fn build_query_grids<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n: usize,
    grid_scale: f64,
    resolution: [usize; 3],
    rng: &mut R,
) -> Result<Vec<QueryGrid>> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one grid"));
    }
    if !(grid_scale > 0.0) {
        return Err(Error::invalid("grid_scale", format!("{grid_scale} must be > 0")));
    }
    let total = cloud.len();
    let centers: Vec<usize> = if n <= total {
        index::sample(rng, total, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..total)).collect()
    };
    centers
        .into_iter()
        .map(|i| QueryGrid::new(cloud.points()[i], 1.0 / grid_scale, resolution))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn downsample_rate_one_is_identity() {
        let c = random_cloud(50, 1);
        let d = random_downsample(&c, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn downsample_by_eight() {
        let c = random_cloud(5000, 2);
        let d = random_downsample(&c, 8.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(d.len(), 625);
        let mut seen = std::collections::HashSet::new();
        for p in d.points() {
            let idx = c.points().iter().position(|q| q == p).expect("member of input");
            assert!(seen.insert(idx), "duplicate");
        }
        let again = random_downsample(&c, 8.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn downsample_rejects_bad_rate() {
        let c = random_cloud(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_downsample(&c, 0.5, &mut rng).is_err());
        assert!(random_downsample(&c, 4.0, &mut rng).is_err());
    }

    #[test]
    fn noise_moments() {
        let c = random_cloud(5000, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert_eq!(add_gaussian_noise(&c, 0.0, &mut rng).unwrap(), c);
        let noisy = add_gaussian_noise(&c, 0.06, &mut rng).unwrap();
        for a in 0..3 {
            let d: Vec<f64> = noisy
                .points()
                .iter()
                .zip(c.points())
                .map(|(p, q)| p[a] - q[a])
                .collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
            let std = var.sqrt();
            assert!((0.054..=0.066).contains(&std), "axis {a}: {std}");
        }
        let n1 = add_gaussian_noise(&c, 0.06, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let n2 = add_gaussian_noise(&c, 0.06, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(n1, n2);
        assert!(add_gaussian_noise(&c, -1.0, &mut rng).is_err());
    }

    #[test]
    fn grid_lattice_geometry() {
        let c = random_cloud(100, 5);
        let grids = build_query_grids(&c, 1, 8.0, [8, 8, 8], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = &grids[0];
        assert_eq!(g.len(), 512);
        assert!(c.points().contains(&g.center));
        let spacing = (1.0 / 8.0) / 7.0;
        assert!((g.points[1].z - g.points[0].z - spacing).abs() < 1e-12);
        assert!((g.points[8].y - g.points[0].y - spacing).abs() < 1e-12);
        assert!((g.points[64].x - g.points[0].x - spacing).abs() < 1e-12);
        let lo = g.points[0];
        let hi = g.points[511];
        assert!((hi - lo - Vec3::repeat(0.125)).amax() < 1e-12);
        assert!(((lo + hi) * 0.5 - g.center).amax() < 1e-12);
    }

    #[test]
    fn grids_use_every_point_when_n_equals_size() {
        let c = random_cloud(2, 6);
        let grids = build_query_grids(&c, 2, 6.0, [3, 3, 3], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut centers: Vec<_> = grids.iter().map(|g| g.center).collect();
        centers.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap());
        let mut pts = c.points().to_vec();
        pts.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap());
        assert_eq!(centers, pts);
        let many = build_query_grids(&c, 9, 6.0, [2, 2, 2], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(many.len(), 9);
        assert!(many.iter().all(|g| c.points().contains(&g.center)));
    }
}
