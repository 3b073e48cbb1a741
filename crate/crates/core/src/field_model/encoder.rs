//! Point cloud to feature volume: per-point features, voxel scatter-mean and
//! volumetric refinement (two convolutions, or a small U-Net).

use rand::Rng;

use crate::geometry::Vec3;
use crate::nn::{
    avg_pool2, avg_pool2_backward, pooled_dims, silu_backward, silu_into, upsample2, upsample2_backward,
    Conv3d, ParamLayout, ResMlp, ResMlpTrace,
};

use super::{EncoderVariant, ModelConfig};

/// Width of the per-point input: absolute position plus offset from the
/// nearest node in voxel units.
pub(super) const POINT_INPUT: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) struct Encoder {
    dims: [usize; 3],
    c1: usize,
    point_net: ResMlp,
    refine: Refine,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Refine {
    Lite { a: Conv3d, b: Conv3d },
    UNet(UNet),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct UNet {
    down: Vec<[Conv3d; 2]>,
    up: Vec<[Conv3d; 2]>,
    head: Conv3d,
}

/// One convolution's input and pre-activation.
#[derive(Debug, Default, Clone)]
struct ConvRecord {
    input: Vec<f64>,
    pre: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(super) struct EncodeTrace {
    point: ResMlpTrace,
    assign: Vec<usize>,
    counts: Vec<usize>,
    refine: RefineTrace,
}

#[derive(Debug, Clone)]
enum RefineTrace {
    Lite { a: ConvRecord, b_input: Vec<f64> },
    UNet { down: Vec<[ConvRecord; 2]>, up: Vec<[ConvRecord; 2]>, head_input: Vec<f64> },
}

fn level_dims(dims: [usize; 3], level: usize) -> [usize; 3] {
    (0..level).fold(dims, |d, _| pooled_dims(d))
}

fn node_count(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

/// Nearest canonical-grid node of `p` (clamped) and that node's position.
pub(super) fn nearest_node(dims: [usize; 3], p: &Vec3) -> (usize, Vec3) {
    let mut idx = [0usize; 3];
    let mut pos = Vec3::zeros();
    for a in 0..3 {
        let s = 1.0 / (dims[a] - 1) as f64;
        let u = ((p[a] + 0.5) / s).round().clamp(0.0, (dims[a] - 1) as f64);
        idx[a] = u as usize;
        pos[a] = -0.5 + u * s;
    }
    ((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2], pos)
}

impl UNet {
    fn new(layout: &mut ParamLayout, c1: usize, c2: usize, levels: usize) -> Self {
        let ch = |l: usize| c2 << l;
        let down = (0..levels)
            .map(|l| {
                let cin = if l == 0 { c1 } else { ch(l - 1) };
                [
                    Conv3d::new(layout, &format!("encoder.unet.down{l}.conv_a"), cin, ch(l), 3),
                    Conv3d::new(layout, &format!("encoder.unet.down{l}.conv_b"), ch(l), ch(l), 3),
                ]
            })
            .collect();
        let up = (0..levels - 1)
            .map(|l| {
                [
                    Conv3d::new(layout, &format!("encoder.unet.up{l}.conv_a"), ch(l + 1) + ch(l), ch(l), 3),
                    Conv3d::new(layout, &format!("encoder.unet.up{l}.conv_b"), ch(l), ch(l), 3),
                ]
            })
            .collect();
        let head = Conv3d::new(layout, "encoder.unet.head", c2, c2, 1);
        Self { down, up, head }
    }

    fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        for pair in self.down.iter().chain(&self.up) {
            pair[0].init(params, rng);
            pair[1].init(params, rng);
        }
        self.head.init(params, rng);
    }
}

/// conv -> silu -> conv -> silu, recording both convolutions when asked.
fn double_conv(
    params: &[f64],
    pair: &[Conv3d; 2],
    input: Vec<f64>,
    dims: [usize; 3],
    record: Option<&mut [ConvRecord; 2]>,
) -> Vec<f64> {
    let mut pre_a = Vec::new();
    pair[0].forward(params, &input, dims, &mut pre_a);
    let mut act_a = Vec::new();
    silu_into(&pre_a, &mut act_a);
    let mut pre_b = Vec::new();
    pair[1].forward(params, &act_a, dims, &mut pre_b);
    let mut out = Vec::new();
    silu_into(&pre_b, &mut out);
    if let Some(rec) = record {
        rec[0] = ConvRecord { input, pre: pre_a };
        rec[1] = ConvRecord {
            input: act_a,
            pre: pre_b,
        };
    }
    out
}

fn double_conv_backward(
    params: &[f64],
    pair: &[Conv3d; 2],
    rec: &[ConvRecord; 2],
    dims: [usize; 3],
    mut d_out: Vec<f64>,
    grads: &mut [f64],
) -> Vec<f64> {
    silu_backward(&rec[1].pre, &mut d_out);
    let mut d_mid = Vec::new();
    pair[1].backward(params, &rec[1].input, dims, &d_out, Some(grads), Some(&mut d_mid));
    silu_backward(&rec[0].pre, &mut d_mid);
    let mut d_in = Vec::new();
    pair[0].backward(params, &rec[0].input, dims, &d_mid, Some(grads), Some(&mut d_in));
    d_in
}

/// Interleaves two channels-last tensors voxel by voxel.
fn concat_channels(a: &[f64], ca: usize, b: &[f64], cb: usize, nodes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nodes * (ca + cb));
    for n in 0..nodes {
        out.extend_from_slice(&a[n * ca..(n + 1) * ca]);
        out.extend_from_slice(&b[n * cb..(n + 1) * cb]);
    }
    out
}

fn split_channels(x: &[f64], ca: usize, cb: usize, nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(nodes * ca);
    let mut b = Vec::with_capacity(nodes * cb);
    for n in 0..nodes {
        let row = &x[n * (ca + cb)..(n + 1) * (ca + cb)];
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    (a, b)
}

impl Encoder {
    pub(super) fn new(layout: &mut ParamLayout, cfg: &ModelConfig) -> Self {
        let point_net = ResMlp::new(
            layout,
            "encoder.point_net",
            POINT_INPUT,
            cfg.point_hidden,
            cfg.point_blocks,
            cfg.c1,
        );
        let refine = match cfg.encoder {
            EncoderVariant::Lite => Refine::Lite {
                a: Conv3d::new(layout, "encoder.conv_a", cfg.c1, cfg.c2, 3),
                b: Conv3d::new(layout, "encoder.conv_b", cfg.c2, cfg.c2, 3),
            },
            EncoderVariant::Full => Refine::UNet(UNet::new(layout, cfg.c1, cfg.c2, cfg.unet_levels)),
        };
        Self {
            dims: cfg.volume_resolution,
            c1: cfg.c1,
            point_net,
            refine,
        }
    }

    pub(super) fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        self.point_net.init(params, rng);
        match &self.refine {
            Refine::Lite { a, b } => {
                a.init(params, rng);
                b.init(params, rng);
            }
            Refine::UNet(u) => u.init(params, rng),
        }
    }

    fn point_inputs(&self, points: &[Vec3]) -> (Vec<f64>, Vec<usize>) {
        let spacing: [f64; 3] = std::array::from_fn(|a| 1.0 / (self.dims[a] - 1) as f64);
        let mut x = Vec::with_capacity(points.len() * POINT_INPUT);
        let mut assign = Vec::with_capacity(points.len());
        for p in points {
            let (node, pos) = nearest_node(self.dims, p);
            x.extend_from_slice(&[p.x, p.y, p.z]);
            for a in 0..3 {
                x.push((p[a] - pos[a]) / spacing[a]);
            }
            assign.push(node);
        }
        (x, assign)
    }

    fn scatter_mean(&self, feats: &[f64], assign: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let c1 = self.c1;
        let nodes = node_count(self.dims);
        let mut grid = vec![0.0; nodes * c1];
        let mut counts = vec![0usize; nodes];
        for (i, &n) in assign.iter().enumerate() {
            counts[n] += 1;
            for (g, f) in grid[n * c1..(n + 1) * c1].iter_mut().zip(&feats[i * c1..(i + 1) * c1]) {
                *g += f;
            }
        }
        for (n, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = 1.0 / c as f64;
                grid[n * c1..(n + 1) * c1].iter_mut().for_each(|v| *v *= inv);
            }
        }
        (grid, counts)
    }

    /// Volume values (channels-last); the trace is kept only when `traced`.
    pub(super) fn forward(&self, params: &[f64], points: &[Vec3], traced: bool) -> (Vec<f64>, Option<EncodeTrace>) {
        let (x, assign) = self.point_inputs(points);
        let (feats, point_trace) = if traced {
            let t = self.point_net.forward(params, &x, points.len());
            (t.output.clone(), Some(t))
        } else {
            (self.point_net.infer(params, &x, points.len()), None)
        };
        let (grid, counts) = self.scatter_mean(&feats, &assign);
        let (values, refine) = match &self.refine {
            Refine::Lite { a, b } => {
                let mut pre_a = Vec::new();
                a.forward(params, &grid, self.dims, &mut pre_a);
                let mut act = Vec::new();
                silu_into(&pre_a, &mut act);
                let mut out = Vec::new();
                b.forward(params, &act, self.dims, &mut out);
                let trace = traced.then(|| RefineTrace::Lite {
                    a: ConvRecord { input: grid, pre: pre_a },
                    b_input: act,
                });
                (out, trace)
            }
            Refine::UNet(u) => self.unet_forward(u, params, grid, traced),
        };
        let trace = point_trace.map(|point| EncodeTrace {
            point,
            assign,
            counts,
            refine: refine.expect("traced"),
        });
        (values, trace)
    }

    fn unet_forward(&self, u: &UNet, params: &[f64], grid: Vec<f64>, traced: bool) -> (Vec<f64>, Option<RefineTrace>) {
        let levels = u.down.len();
        let mut down_rec: Vec<[ConvRecord; 2]> = vec![Default::default(); if traced { levels } else { 0 }];
        let mut up_rec: Vec<[ConvRecord; 2]> = vec![Default::default(); if traced { levels - 1 } else { 0 }];
        let mut skips: Vec<Vec<f64>> = Vec::with_capacity(levels);
        let mut input = grid;
        for l in 0..levels {
            let dims = level_dims(self.dims, l);
            if l > 0 {
                input = avg_pool2(&skips[l - 1], level_dims(self.dims, l - 1), u.down[l - 1][1].cout);
            }
            let out = double_conv(params, &u.down[l], input, dims, down_rec.get_mut(l));
            skips.push(out);
            input = Vec::new();
        }
        let mut y = skips.pop().expect("levels >= 1");
        for l in (0..levels - 1).rev() {
            let dims = level_dims(self.dims, l);
            let c_up = u.down[l + 1][1].cout;
            let c_skip = u.down[l][1].cout;
            let up = upsample2(&y, dims, c_up);
            let skip = skips.pop().expect("one skip per level");
            let cat = concat_channels(&up, c_up, &skip, c_skip, node_count(dims));
            y = double_conv(params, &u.up[l], cat, dims, up_rec.get_mut(l));
        }
        let mut out = Vec::new();
        u.head.forward(params, &y, self.dims, &mut out);
        let trace = traced.then(|| RefineTrace::UNet {
            down: down_rec,
            up: up_rec,
            head_input: y,
        });
        (out, trace)
    }

    /// Accumulates parameter gradients given the gradient of the volume values.
    pub(super) fn backward(&self, params: &[f64], trace: &EncodeTrace, d_volume: &[f64], grads: &mut [f64]) {
        let d_grid = match (&self.refine, &trace.refine) {
            (Refine::Lite { a, b }, RefineTrace::Lite { a: rec_a, b_input }) => {
                let mut d_act = Vec::new();
                b.backward(params, b_input, self.dims, d_volume, Some(grads), Some(&mut d_act));
                silu_backward(&rec_a.pre, &mut d_act);
                let mut d_grid = Vec::new();
                a.backward(params, &rec_a.input, self.dims, &d_act, Some(grads), Some(&mut d_grid));
                d_grid
            }
            (Refine::UNet(u), RefineTrace::UNet { down, up, head_input }) => {
                let mut d_y = Vec::new();
                u.head
                    .backward(params, head_input, self.dims, d_volume, Some(grads), Some(&mut d_y));
                let levels = u.down.len();
                let mut d_skips: Vec<Vec<f64>> = Vec::with_capacity(levels);
                for l in 0..levels - 1 {
                    let dims = level_dims(self.dims, l);
                    let c_up = u.down[l + 1][1].cout;
                    let c_skip = u.down[l][1].cout;
                    let d_cat = double_conv_backward(params, &u.up[l], &up[l], dims, d_y, grads);
                    let (d_up, d_skip) = split_channels(&d_cat, c_up, c_skip, node_count(dims));
                    d_skips.push(d_skip);
                    d_y = upsample2_backward(&d_up, dims, c_up);
                }
                d_skips.push(d_y);
                let mut carry: Option<Vec<f64>> = None;
                for l in (0..levels).rev() {
                    let dims = level_dims(self.dims, l);
                    let mut d_out = std::mem::take(&mut d_skips[l]);
                    if let Some(c) = carry.take() {
                        d_out.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
                    }
                    let d_in = double_conv_backward(params, &u.down[l], &down[l], dims, d_out, grads);
                    if l > 0 {
                        carry = Some(avg_pool2_backward(&d_in, level_dims(self.dims, l - 1), u.down[l - 1][1].cout));
                    } else {
                        carry = Some(d_in);
                    }
                }
                carry.expect("levels >= 1")
            }
            _ => unreachable!("trace produced by a different encoder variant"),
        };
        let c1 = self.c1;
        let mut d_feats = vec![0.0; trace.assign.len() * c1];
        for (i, &n) in trace.assign.iter().enumerate() {
            let inv = 1.0 / trace.counts[n] as f64;
            for (d, g) in d_feats[i * c1..(i + 1) * c1].iter_mut().zip(&d_grid[n * c1..(n + 1) * c1]) {
                *d = g * inv;
            }
        }
        self.point_net.backward(params, &trace.point, &d_feats, Some(grads), false);
    }
}
