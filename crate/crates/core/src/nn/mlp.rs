use rand::Rng;

use super::{silu_backward, silu_into, Linear, ParamLayout};

/// `fc_in -> [h += fc_b(silu(fc_a(silu(h))))] x blocks -> silu -> fc_out`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResMlp {
    fc_in: Linear,
    blocks: Vec<(Linear, Linear)>,
    fc_out: Linear,
}

/// Activations kept for the backward pass.
#[derive(Debug, Default, Clone)]
pub struct ResMlpTrace {
    rows: usize,
    input: Vec<f64>,
    /// Residual stream before each block, then after the last one.
    stream: Vec<Vec<f64>>,
    act_in: Vec<Vec<f64>>,
    mid_pre: Vec<Vec<f64>>,
    mid_act: Vec<Vec<f64>>,
    final_act: Vec<f64>,
    pub output: Vec<f64>,
}

impl ResMlp {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        fan_in: usize,
        hidden: usize,
        blocks: usize,
        fan_out: usize,
    ) -> Self {
        let fc_in = Linear::new(layout, &format!("{name}.fc_in"), fan_in, hidden);
        let blocks = (0..blocks)
            .map(|b| {
                (
                    Linear::new(layout, &format!("{name}.block{b}.fc_a"), hidden, hidden),
                    Linear::new(layout, &format!("{name}.block{b}.fc_b"), hidden, hidden),
                )
            })
            .collect();
        let fc_out = Linear::new(layout, &format!("{name}.fc_out"), hidden, fan_out);
        Self {
            fc_in,
            blocks,
            fc_out,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        self.fc_in.init(params, rng);
        for (a, b) in &self.blocks {
            a.init(params, rng);
            b.init(params, rng);
        }
        self.fc_out.init(params, rng);
    }

    pub fn fan_in(&self) -> usize {
        self.fc_in.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fc_out.fan_out
    }

    pub fn output_layer(&self) -> &Linear {
        &self.fc_out
    }

    pub fn forward(&self, params: &[f64], x: &[f64], rows: usize) -> ResMlpTrace {
        let mut t = ResMlpTrace {
            rows,
            input: x.to_vec(),
            ..Default::default()
        };
        let mut h = Vec::new();
        self.fc_in.forward(params, x, rows, &mut h);
        for (fa, fb) in &self.blocks {
            let mut a1 = Vec::new();
            silu_into(&h, &mut a1);
            let mut z1 = Vec::new();
            fa.forward(params, &a1, rows, &mut z1);
            let mut a2 = Vec::new();
            silu_into(&z1, &mut a2);
            let mut z2 = Vec::new();
            fb.forward(params, &a2, rows, &mut z2);
            let next: Vec<f64> = h.iter().zip(&z2).map(|(a, b)| a + b).collect();
            t.stream.push(h);
            t.act_in.push(a1);
            t.mid_pre.push(z1);
            t.mid_act.push(a2);
            h = next;
        }
        silu_into(&h, &mut t.final_act);
        t.stream.push(h);
        self.fc_out.forward(params, &t.final_act, rows, &mut t.output);
        t
    }

    /// Output only, without keeping intermediate activations.
    pub fn infer(&self, params: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = Vec::new();
        self.fc_in.forward(params, x, rows, &mut h);
        let (mut a1, mut z1, mut a2, mut z2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (fa, fb) in &self.blocks {
            silu_into(&h, &mut a1);
            fa.forward(params, &a1, rows, &mut z1);
            silu_into(&z1, &mut a2);
            fb.forward(params, &a2, rows, &mut z2);
            h.iter_mut().zip(&z2).for_each(|(a, b)| *a += b);
        }
        silu_into(&h, &mut a1);
        let mut out = Vec::new();
        self.fc_out.forward(params, &a1, rows, &mut out);
        out
    }

    /// Backpropagates `d_out`; returns the input gradient when `want_dx`.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &ResMlpTrace,
        d_out: &[f64],
        mut grads: Option<&mut [f64]>,
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let rows = trace.rows;
        let mut dh = Vec::new();
        self.fc_out
            .backward(params, &trace.final_act, d_out, rows, grads.as_deref_mut(), Some(&mut dh));
        silu_backward(&trace.stream[self.blocks.len()], &mut dh);
        let mut d_a2 = Vec::new();
        let mut d_a1 = Vec::new();
        for (b, (fa, fb)) in self.blocks.iter().enumerate().rev() {
            fb.backward(params, &trace.mid_act[b], &dh, rows, grads.as_deref_mut(), Some(&mut d_a2));
            silu_backward(&trace.mid_pre[b], &mut d_a2);
            fa.backward(params, &trace.act_in[b], &d_a2, rows, grads.as_deref_mut(), Some(&mut d_a1));
            silu_backward(&trace.stream[b], &mut d_a1);
            dh.iter_mut().zip(&d_a1).for_each(|(a, b)| *a += b);
        }
        let mut dx = Vec::new();
        self.fc_in.backward(
            params,
            &trace.input,
            &dh,
            rows,
            grads,
            if want_dx { Some(&mut dx) } else { None },
        );
        want_dx.then_some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_differences() {
        let mut layout = ParamLayout::default();
        let mlp = ResMlp::new(&mut layout, "m", 3, 5, 2, 2);
        let mut params = vec![0.0; layout.len()];
        mlp.init(&mut params, &mut ChaCha8Rng::seed_from_u64(4));
        let rows = 4;
        let x: Vec<f64> = (0..rows * 3).map(|i| (i as f64 * 0.7).sin()).collect();
        let coef = [0.3, -1.0, 0.5, 0.8, -0.2, 0.1, 1.2, -0.4];
        let f = |p: &[f64], x: &[f64]| -> f64 {
            mlp.infer(p, x, rows).iter().zip(&coef).map(|(a, b)| a * b).sum()
        };
        let trace = mlp.forward(&params, &x, rows);
        assert_eq!(trace.output, mlp.infer(&params, &x, rows));
        let mut grads = vec![0.0; params.len()];
        let dx = mlp.backward(&params, &trace, &coef, Some(&mut grads), true).unwrap();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let hi = f(&p, &x);
            p[i] -= 2.0 * h;
            let lo = f(&p, &x);
            let fd = (hi - lo) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
        for i in 0..x.len() {
            let mut xx = x.clone();
            xx[i] += h;
            let hi = f(&params, &xx);
            xx[i] -= 2.0 * h;
            let lo = f(&params, &xx);
            assert!(((hi - lo) / (2.0 * h) - dx[i]).abs() < 1e-7);
        }
    }
}
