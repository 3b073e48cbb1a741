use rand::Rng;

use super::{fan_in_uniform, gemm, ParamLayout};

/// Row-wise affine map `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = layout.alloc(format!("{name}.weight"), fan_in * fan_out);
        let b = layout.alloc(format!("{name}.bias"), fan_out);
        Self {
            fan_in,
            fan_out,
            w,
            b,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        fan_in_uniform(rng, self.fan_in, &mut params[self.w..self.w + self.fan_in * self.fan_out]);
        fan_in_uniform(rng, self.fan_in, &mut params[self.b..self.b + self.fan_out]);
    }

    pub fn weight<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.w..self.w + self.fan_in * self.fan_out]
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.b..self.b + self.fan_out]
    }

    pub fn bias_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.b..self.b + self.fan_out]
    }

    /// `x` holds `rows` inputs; `out` is resized to `rows * fan_out`.
    pub fn forward(&self, params: &[f64], x: &[f64], rows: usize, out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), rows * self.fan_in);
        out.clear();
        let bias = self.bias(params);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(rows, self.fan_in, self.fan_out, x, false, self.weight(params), true, out, 1.0);
    }

    /// Accumulates parameter gradients into `grads` (same layout as `params`)
    /// and, when requested, writes the input gradient into `dx`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        dy: &[f64],
        rows: usize,
        grads: Option<&mut [f64]>,
        dx: Option<&mut Vec<f64>>,
    ) {
        debug_assert_eq!(dy.len(), rows * self.fan_out);
        if let Some(g) = grads {
            let (gw, gb) = {
                let (head, tail) = g.split_at_mut(self.b);
                (&mut head[self.w..self.w + self.fan_in * self.fan_out], &mut tail[..self.fan_out])
            };
            gemm(self.fan_out, rows, self.fan_in, dy, true, x, false, gw, 1.0);
            for r in 0..rows {
                for (acc, d) in gb.iter_mut().zip(&dy[r * self.fan_out..(r + 1) * self.fan_out]) {
                    *acc += d;
                }
            }
        }
        if let Some(dx) = dx {
            dx.clear();
            dx.resize(rows * self.fan_in, 0.0);
            gemm(rows, self.fan_out, self.fan_in, dy, false, self.weight(params), false, dx, 0.0);
        }
    }
}
