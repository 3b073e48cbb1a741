//! Minimal dense and volumetric layers with hand-written backward passes.
//!
//! Parameters of a whole network live in one flat `f64` buffer; layers only
//! remember offsets into it, so a gradient buffer of the same length mirrors
//! the layout exactly.

mod conv;
mod linear;
mod mlp;

pub use conv::{avg_pool2, avg_pool2_backward, pooled_dims, upsample2, upsample2_backward, Conv3d};
pub use linear::Linear;
pub use mlp::{ResMlp, ResMlpTrace};

use rand::Rng;

/// One named, contiguous block of parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Allocates named sections in a flat parameter buffer.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    sections: Vec<Section>,
    len: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, name: impl Into<String>, len: usize) -> usize {
        let offset = self.len;
        self.sections.push(Section {
            name: name.into(),
            offset,
            len,
        });
        self.len += len;
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}

/// Fills `out` with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, out: &mut [f64]) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in out {
        *v = rng.random_range(-bound..bound);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_into(pre: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(pre.iter().map(|&x| silu(x)));
}

/// `d_pre = d_out * silu'(pre)`, in place on `d`.
pub fn silu_backward(pre: &[f64], d: &mut [f64]) {
    for (g, &x) in d.iter_mut().zip(pre) {
        *g *= silu_grad(x);
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, all row-major unless the
/// transpose flags say otherwise.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index touched by the
    // given strides; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4],[5,6]] (3x2), b = [[1,0,2],[0,1,1]] (2x3)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 2.0, 0.0, 1.0, 1.0];
        let mut c = vec![0.0; 9];
        gemm(3, 2, 3, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, vec![1.0, 2.0, 4.0, 3.0, 4.0, 10.0, 5.0, 6.0, 16.0]);
        // a^T (2x3) * a (3x2)
        let mut c2 = vec![0.0; 4];
        gemm(2, 3, 2, &a, true, &a, false, &mut c2, 0.0);
        assert_eq!(c2, vec![35.0, 44.0, 44.0, 56.0]);
        // a (3x2) * a^T (2x3), accumulated twice
        let mut c3 = vec![0.0; 9];
        gemm(3, 2, 3, &a, false, &a, true, &mut c3, 0.0);
        gemm(3, 2, 3, &a, false, &a, true, &mut c3, 1.0);
        assert_eq!(c3[0], 10.0);
        assert_eq!(c3[5], 2.0 * 39.0);
    }

    #[test]
    fn silu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
