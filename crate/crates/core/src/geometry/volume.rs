use super::Vec3;
use crate::error::{Error, Result};

/// A `channels x H x W x D` grid of feature vectors whose node `(i, j, k)`
/// sits at `origin + (i, j, k) * spacing`.
///
/// Storage is channels-last: the feature vector of node `(i, j, k)` is the
/// contiguous slice starting at `((i * W + j) * D + k) * channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    channels: usize,
    dims: [usize; 3],
    origin: Vec3,
    spacing: Vec3,
    values: Vec<f64>,
}

impl FeatureVolume {
    /// A volume whose nodes span the canonical cube corner to corner.
    pub fn canonical(channels: usize, dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        let spacing = Vec3::new(
            1.0 / (dims[0].max(2) - 1) as f64,
            1.0 / (dims[1].max(2) - 1) as f64,
            1.0 / (dims[2].max(2) - 1) as f64,
        );
        Self::new(channels, dims, Vec3::repeat(-0.5), spacing, values)
    }

    pub fn new(
        channels: usize,
        dims: [usize; 3],
        origin: Vec3,
        spacing: Vec3,
        values: Vec<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::invalid("dims", format!("{dims:?}: every axis needs >= 2 nodes")));
        }
        if channels == 0 {
            return Err(Error::invalid("channels", "must be >= 1"));
        }
        if !spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("spacing", format!("{spacing:?} must be positive")));
        }
        let expected = channels * dims[0] * dims[1] * dims[2];
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                what: "feature volume values",
                left: values.len(),
                right: expected,
            });
        }
        Ok(Self {
            channels,
            dims,
            origin,
            spacing,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_nodes(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64).component_mul(&self.spacing)
    }

    pub fn feature(&self, node: usize) -> &[f64] {
        &self.values[node * self.channels..(node + 1) * self.channels]
    }

    /// Nearest node to `p`, clamped into the grid.
    pub fn nearest_node(&self, p: &Vec3) -> usize {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = ((p[a] - self.origin[a]) / self.spacing[a]).round();
            idx[a] = u.clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        self.node_index(idx[0], idx[1], idx[2])
    }

    /// Interpolation weights for `p`. Coordinates beyond the outermost nodes
    /// are clamped onto them, so the stencil is constant (zero gradient)
    /// along any clamped axis.
    pub fn stencil(&self, p: &Vec3) -> TrilinearStencil {
        let mut base = [0usize; 3];
        let mut t = [0.0f64; 3];
        let mut dt = [0.0f64; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let u = (p[a] - self.origin[a]) / self.spacing[a];
            let (uc, inside) = if u <= 0.0 {
                (0.0, false)
            } else if u >= max {
                (max, false)
            } else {
                (u, true)
            };
            let b = (uc.floor() as usize).min(self.dims[a] - 2);
            base[a] = b;
            t[a] = uc - b as f64;
            dt[a] = if inside { 1.0 / self.spacing[a] } else { 0.0 };
        }
        let mut nodes = [0usize; 8];
        let mut weights = [0.0; 8];
        let mut grads = [[0.0; 3]; 8];
        for c in 0..8 {
            let o = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
            nodes[c] = self.node_index(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
            let f = |a: usize| if o[a] == 1 { t[a] } else { 1.0 - t[a] };
            let df = |a: usize| if o[a] == 1 { dt[a] } else { -dt[a] };
            let (fx, fy, fz) = (f(0), f(1), f(2));
            weights[c] = fx * fy * fz;
            grads[c] = [df(0) * fy * fz, fx * df(1) * fz, fx * fy * df(2)];
        }
        TrilinearStencil {
            nodes,
            weights,
            grads,
        }
    }

    /// Interpolated feature at `p`, written into `out` (length = channels).
    pub fn sample_into(&self, p: &Vec3, out: &mut [f64]) {
        let s = self.stencil(p);
        s.gather(&self.values, self.channels, out);
    }

    pub fn sample(&self, p: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(p, &mut out);
        out
    }
}

/// The eight enclosing nodes of a query with their weights and the weights'
/// derivatives with respect to the query coordinates.
#[derive(Debug, Clone, Copy)]
pub struct TrilinearStencil {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
    pub grads: [[f64; 3]; 8],
}

impl TrilinearStencil {
    pub fn gather(&self, values: &[f64], channels: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..8 {
            let w = self.weights[c];
            if w == 0.0 {
                continue;
            }
            let f = &values[self.nodes[c] * channels..(self.nodes[c] + 1) * channels];
            for (o, v) in out.iter_mut().zip(f) {
                *o += w * v;
            }
        }
    }

    /// Accumulates `d_out` into the per-node gradient buffer.
    pub fn scatter(&self, d_out: &[f64], channels: usize, d_values: &mut [f64]) {
        for c in 0..8 {
            let w = self.weights[c];
            if w == 0.0 {
                continue;
            }
            let g = &mut d_values[self.nodes[c] * channels..(self.nodes[c] + 1) * channels];
            for (gv, d) in g.iter_mut().zip(d_out) {
                *gv += w * d;
            }
        }
    }

    /// Gradient of `<d_out, sample(p)>` with respect to `p`.
    pub fn query_grad(&self, values: &[f64], channels: usize, d_out: &[f64]) -> Vec3 {
        let mut g = Vec3::zeros();
        for c in 0..8 {
            let f = &values[self.nodes[c] * channels..(self.nodes[c] + 1) * channels];
            let dot: f64 = f.iter().zip(d_out).map(|(a, b)| a * b).sum();
            g += Vec3::new(self.grads[c][0], self.grads[c][1], self.grads[c][2]) * dot;
        }
        g
    }
}

/// Samples the volume at every point.
pub fn trilinear_sample(volume: &FeatureVolume, points: &[Vec3]) -> Vec<Vec<f64>> {
    points.iter().map(|p| volume.sample(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, channels: usize, dims: [usize; 3]) -> FeatureVolume {
        let n = channels * dims.iter().product::<usize>();
        let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureVolume::canonical(channels, dims, values).unwrap()
    }

    #[test]
    fn rejects_small_dims() {
        assert!(FeatureVolume::canonical(1, [1, 4, 4], vec![0.0; 16]).is_err());
    }

    #[test]
    fn node_centers_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(&mut rng, 3, [4, 5, 6]);
        for (i, j, k) in [(0, 0, 0), (3, 4, 5), (1, 2, 3)] {
            let node = v.node_index(i, j, k);
            let got = v.sample(&v.node_position(i, j, k));
            for (a, b) in got.iter().zip(v.feature(node)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn midpoint_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_volume(&mut rng, 2, [5, 5, 5]);
        let p = (v.node_position(1, 2, 3) + v.node_position(2, 2, 3)) * 0.5;
        let got = v.sample(&p);
        let a = v.feature(v.node_index(1, 2, 3));
        let b = v.feature(v.node_index(2, 2, 3));
        for c in 0..2 {
            assert!((got[c] - 0.5 * (a[c] + b[c])).abs() < 1e-12);
        }
    }

    /// Brute-force oracle: locate the cell by scanning node coordinates and
    /// form the eight-corner weighted sum directly.
    fn oracle(v: &FeatureVolume, p: &Vec3) -> Vec<f64> {
        let dims = v.dims();
        let mut lo = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let coord = |i: usize| v.origin()[a] + i as f64 * v.spacing()[a];
            let x = p[a].clamp(coord(0), coord(dims[a] - 1));
            let mut i = 0;
            while i + 2 < dims[a] && coord(i + 1) <= x {
                i += 1;
            }
            lo[a] = i;
            frac[a] = (x - coord(i)) / (coord(i + 1) - coord(i));
        }
        let mut out = vec![0.0; v.channels()];
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
                    let f = v.feature(v.node_index(lo[0] + dx, lo[1] + dy, lo[2] + dz));
                    for c in 0..out.len() {
                        out[c] += w * f[c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_corner_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_volume(&mut rng, 4, [6, 7, 5]);
        for _ in 0..100 {
            let p = Vec3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            );
            let got = v.sample(&p);
            for (a, b) in got.iter().zip(oracle(&v, &p)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn exact_on_affine_fields() {
        let dims = [5, 6, 7];
        let a = Vec3::new(0.3, -1.2, 2.0);
        let b = 0.7;
        let mut values = Vec::new();
        let proto = FeatureVolume::canonical(1, dims, vec![0.0; 210]).unwrap();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    values.push(a.dot(&proto.node_position(i, j, k)) + b);
                }
            }
        }
        let v = FeatureVolume::canonical(1, dims, values).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let q = Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            assert!((v.sample(&q)[0] - (a.dot(&q) + b)).abs() < 1e-6);
        }
    }

    #[test]
    fn outside_points_clamp_to_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_volume(&mut rng, 2, [4, 4, 4]);
        let inside = v.sample(&Vec3::new(0.5, 0.1, -0.2));
        let outside = v.sample(&Vec3::new(0.9, 0.1, -0.2));
        assert_eq!(inside, outside);
        let s = v.stencil(&Vec3::new(0.9, 0.1, -0.2));
        assert!(s.grads.iter().all(|g| g[0] == 0.0));
    }

    #[test]
    fn query_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random_volume(&mut rng, 3, [6, 6, 6]);
        let d_out = [0.3, -0.7, 1.1];
        let f = |p: &Vec3| -> f64 { v.sample(p).iter().zip(&d_out).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for _ in 0..50 {
            let p = Vec3::new(
                rng.random_range(-0.45..0.45),
                rng.random_range(-0.45..0.45),
                rng.random_range(-0.45..0.45),
            );
            let g = v.stencil(&p).query_grad(v.values(), 3, &d_out);
            for a in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[a] += h;
                lo[a] -= h;
                let fd = (f(&hi) - f(&lo)) / (2.0 * h);
                assert!((fd - g[a]).abs() < 1e-5 * (1.0 + g[a].abs()), "{fd} vs {}", g[a]);
            }
        }
    }
}
