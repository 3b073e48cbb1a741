use rand::Rng;

use super::{fan_in_uniform, gemm, ParamLayout};

/// Rows of the im2col buffer processed at once; bounds scratch memory.
const SLAB_ELEMS: usize = 1 << 21;

/// Same-padded 3D convolution over channels-last volumes, kernel 1 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    w: usize,
    b: usize,
}

impl Conv3d {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        let taps = kernel * kernel * kernel;
        let w = layout.alloc(format!("{name}.weight"), cout * taps * cin);
        let b = layout.alloc(format!("{name}.bias"), cout);
        Self {
            cin,
            cout,
            kernel,
            w,
            b,
        }
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.taps() * self.cin
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let k = self.cols();
        fan_in_uniform(rng, k, &mut params[self.w..self.w + self.cout * k]);
        fan_in_uniform(rng, k, &mut params[self.b..self.b + self.cout]);
    }

    fn offsets(&self) -> Vec<[isize; 3]> {
        let r = (self.kernel / 2) as isize;
        let mut out = Vec::with_capacity(self.taps());
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }

    fn slab_rows(&self) -> usize {
        (SLAB_ELEMS / self.cols()).max(1)
    }

    fn im2col(&self, input: &[f64], dims: [usize; 3], r0: usize, r1: usize, cols: &mut Vec<f64>) {
        let k = self.cols();
        let cin = self.cin;
        cols.clear();
        cols.resize((r1 - r0) * k, 0.0);
        let offsets = self.offsets();
        for r in r0..r1 {
            let (i, j, l) = unflatten(r, dims);
            let row = &mut cols[(r - r0) * k..(r - r0 + 1) * k];
            for (t, o) in offsets.iter().enumerate() {
                if let Some(n) = neighbor(i, j, l, o, dims) {
                    row[t * cin..(t + 1) * cin].copy_from_slice(&input[n * cin..(n + 1) * cin]);
                }
            }
        }
    }

    pub fn forward(&self, params: &[f64], input: &[f64], dims: [usize; 3], out: &mut Vec<f64>) {
        let nodes = dims[0] * dims[1] * dims[2];
        debug_assert_eq!(input.len(), nodes * self.cin);
        let k = self.cols();
        let weight = &params[self.w..self.w + self.cout * k];
        let bias = &params[self.b..self.b + self.cout];
        out.clear();
        for _ in 0..nodes {
            out.extend_from_slice(bias);
        }
        let mut cols = Vec::new();
        let step = self.slab_rows();
        let mut r0 = 0;
        while r0 < nodes {
            let r1 = (r0 + step).min(nodes);
            self.im2col(input, dims, r0, r1, &mut cols);
            gemm(
                r1 - r0,
                k,
                self.cout,
                &cols,
                false,
                weight,
                true,
                &mut out[r0 * self.cout..r1 * self.cout],
                1.0,
            );
            r0 = r1;
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        dims: [usize; 3],
        d_out: &[f64],
        grads: Option<&mut [f64]>,
        d_in: Option<&mut Vec<f64>>,
    ) {
        let nodes = dims[0] * dims[1] * dims[2];
        let k = self.cols();
        let cin = self.cin;
        let weight = &params[self.w..self.w + self.cout * k];
        let mut grads = grads;
        let mut d_in = d_in;
        if let Some(d) = d_in.as_deref_mut() {
            d.clear();
            d.resize(nodes * cin, 0.0);
        }
        if let Some(g) = grads.as_deref_mut() {
            let gb = &mut g[self.b..self.b + self.cout];
            for r in 0..nodes {
                for (acc, v) in gb.iter_mut().zip(&d_out[r * self.cout..(r + 1) * self.cout]) {
                    *acc += v;
                }
            }
        }
        let offsets = self.offsets();
        let mut cols = Vec::new();
        let mut d_cols = Vec::new();
        let step = self.slab_rows();
        let mut r0 = 0;
        while r0 < nodes {
            let r1 = (r0 + step).min(nodes);
            let rows = r1 - r0;
            let dy = &d_out[r0 * self.cout..r1 * self.cout];
            if let Some(g) = grads.as_deref_mut() {
                self.im2col(input, dims, r0, r1, &mut cols);
                let gw = &mut g[self.w..self.w + self.cout * k];
                gemm(self.cout, rows, k, dy, true, &cols, false, gw, 1.0);
            }
            if let Some(d) = d_in.as_deref_mut() {
                d_cols.clear();
                d_cols.resize(rows * k, 0.0);
                gemm(rows, self.cout, k, dy, false, weight, false, &mut d_cols, 0.0);
                for r in r0..r1 {
                    let (i, j, l) = unflatten(r, dims);
                    let row = &d_cols[(r - r0) * k..(r - r0 + 1) * k];
                    for (t, o) in offsets.iter().enumerate() {
                        if let Some(n) = neighbor(i, j, l, o, dims) {
                            for (acc, v) in d[n * cin..(n + 1) * cin].iter_mut().zip(&row[t * cin..(t + 1) * cin]) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            r0 = r1;
        }
    }
}

#[inline]
fn unflatten(r: usize, dims: [usize; 3]) -> (usize, usize, usize) {
    let l = r % dims[2];
    let j = (r / dims[2]) % dims[1];
    let i = r / (dims[1] * dims[2]);
    (i, j, l)
}

#[inline]
fn neighbor(i: usize, j: usize, l: usize, o: &[isize; 3], dims: [usize; 3]) -> Option<usize> {
    let a = i as isize + o[0];
    let b = j as isize + o[1];
    let c = l as isize + o[2];
    if a < 0 || b < 0 || c < 0 || a >= dims[0] as isize || b >= dims[1] as isize || c >= dims[2] as isize {
        return None;
    }
    Some((a as usize * dims[1] + b as usize) * dims[2] + c as usize)
}

pub fn pooled_dims(dims: [usize; 3]) -> [usize; 3] {
    [dims[0].div_ceil(2), dims[1].div_ceil(2), dims[2].div_ceil(2)]
}

/// 2x average pooling; edge windows are averaged over the nodes they cover.
pub fn avg_pool2(input: &[f64], dims: [usize; 3], channels: usize) -> Vec<f64> {
    let od = pooled_dims(dims);
    let mut out = vec![0.0; od[0] * od[1] * od[2] * channels];
    let mut counts = vec![0usize; od[0] * od[1] * od[2]];
    for r in 0..dims[0] * dims[1] * dims[2] {
        let (i, j, l) = unflatten(r, dims);
        let o = ((i / 2) * od[1] + j / 2) * od[2] + l / 2;
        counts[o] += 1;
        for (acc, v) in out[o * channels..(o + 1) * channels]
            .iter_mut()
            .zip(&input[r * channels..(r + 1) * channels])
        {
            *acc += v;
        }
    }
    for (o, &c) in counts.iter().enumerate() {
        let inv = 1.0 / c as f64;
        out[o * channels..(o + 1) * channels].iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn avg_pool2_backward(d_out: &[f64], dims: [usize; 3], channels: usize) -> Vec<f64> {
    let od = pooled_dims(dims);
    let mut counts = vec![0usize; od[0] * od[1] * od[2]];
    for r in 0..dims[0] * dims[1] * dims[2] {
        let (i, j, l) = unflatten(r, dims);
        counts[((i / 2) * od[1] + j / 2) * od[2] + l / 2] += 1;
    }
    let mut d_in = vec![0.0; dims[0] * dims[1] * dims[2] * channels];
    for r in 0..dims[0] * dims[1] * dims[2] {
        let (i, j, l) = unflatten(r, dims);
        let o = ((i / 2) * od[1] + j / 2) * od[2] + l / 2;
        let inv = 1.0 / counts[o] as f64;
        for (d, v) in d_in[r * channels..(r + 1) * channels]
            .iter_mut()
            .zip(&d_out[o * channels..(o + 1) * channels])
        {
            *d = v * inv;
        }
    }
    d_in
}

/// Nearest-neighbour 2x upsampling onto `fine` dims (the pre-pool shape).
pub fn upsample2(input: &[f64], fine: [usize; 3], channels: usize) -> Vec<f64> {
    let cd = pooled_dims(fine);
    let mut out = vec![0.0; fine[0] * fine[1] * fine[2] * channels];
    for r in 0..fine[0] * fine[1] * fine[2] {
        let (i, j, l) = unflatten(r, fine);
        let c = ((i / 2) * cd[1] + j / 2) * cd[2] + l / 2;
        out[r * channels..(r + 1) * channels].copy_from_slice(&input[c * channels..(c + 1) * channels]);
    }
    out
}

pub fn upsample2_backward(d_out: &[f64], fine: [usize; 3], channels: usize) -> Vec<f64> {
    let cd = pooled_dims(fine);
    let mut d_in = vec![0.0; cd[0] * cd[1] * cd[2] * channels];
    for r in 0..fine[0] * fine[1] * fine[2] {
        let (i, j, l) = unflatten(r, fine);
        let c = ((i / 2) * cd[1] + j / 2) * cd[2] + l / 2;
        for (acc, v) in d_in[c * channels..(c + 1) * channels]
            .iter_mut()
            .zip(&d_out[r * channels..(r + 1) * channels])
        {
            *acc += v;
        }
    }
    d_in
}
