use serde::{Deserialize, Serialize};

use super::{join, Param, Parameterized, Tensor4};
use crate::rng::Rng;

/// 3×3 convolution, stride 1, zero padding 1 (spatial size preserved).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub in_c: usize,
    pub out_c: usize,
    /// `[out][in][3][3]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv3x3 {
    pub fn new(in_c: usize, out_c: usize, rng: &mut Rng) -> Self {
        Self {
            in_c,
            out_c,
            weight: Param::he(out_c * in_c * 9, in_c * 9, rng),
            bias: Param::zeros(out_c),
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (n, h, w) = (x.n, x.h, x.w);
        let cols = im2col(x);
        let p = n * h * w;
        let k = self.in_c * 9;
        // (out_c × k) · (k × p)
        let mut y = vec![0.0; self.out_c * p];
        gemm(self.out_c, k, p, &self.weight.value, (k as isize, 1), &cols, (p as isize, 1), &mut y, 0.0);
        let mut out = Tensor4::zeros(n, self.out_c, h, w);
        let hw = h * w;
        for oc in 0..self.out_c {
            let b = self.bias.value[oc];
            for s in 0..n {
                let dst = out.idx(s, oc, 0, 0);
                let src = oc * p + s * hw;
                for (o, v) in out.data[dst..dst + hw].iter_mut().zip(&y[src..src + hw]) {
                    *o = v + b;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, x: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
        let (n, h, w) = (x.n, x.h, x.w);
        let hw = h * w;
        let p = n * hw;
        let k = self.in_c * 9;
        // gradient rearranged to (out_c × p)
        let mut g = vec![0.0; self.out_c * p];
        for oc in 0..self.out_c {
            for s in 0..n {
                let src = grad_out.idx(s, oc, 0, 0);
                g[oc * p + s * hw..oc * p + (s + 1) * hw].copy_from_slice(&grad_out.data[src..src + hw]);
            }
            self.bias.grad[oc] += g[oc * p..(oc + 1) * p].iter().sum::<f64>();
        }
        let cols = im2col(x);
        // dW += g · colsᵀ
        gemm(self.out_c, p, k, &g, (p as isize, 1), &cols, (1, p as isize), &mut self.weight.grad, 1.0);
        // dcols = Wᵀ · g
        let mut gcols = vec![0.0; k * p];
        gemm(k, self.out_c, p, &self.weight.value, (1, k as isize), &g, (p as isize, 1), &mut gcols, 0.0);
        col2im(&gcols, x.n, x.c, h, w)
    }
}

/// `c ← a·b + beta·c` for row-major `c` of shape `(m, n)`; `a` is `(m, k)`
/// and `b` is `(k, n)` with the given (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe in-bounds views of `a`, `b`, `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Rows `(ic, ky, kx)`, columns `(sample, y, x)`; zero outside the input.
fn im2col(x: &Tensor4) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let p = x.n * hw;
    let mut cols = vec![0.0; x.c * 9 * p];
    for ic in 0..x.c {
        for ky in 0..3 {
            let (y0, y1) = range(ky, h);
            for kx in 0..3 {
                let (x0, x1) = range(kx, w);
                let row = ((ic * 9) + ky * 3 + kx) * p;
                for s in 0..x.n {
                    let base = x.idx(s, ic, 0, 0);
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let dst = row + s * hw + y * w;
                        let src = base + iy * w;
                        cols[dst + x0..dst + x1].copy_from_slice(&x.data[src + x0 + kx - 1..src + x1 + kx - 1]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let hw = h * w;
    let p = n * hw;
    let mut gx = Tensor4::zeros(n, c, h, w);
    for ic in 0..c {
        for ky in 0..3 {
            let (y0, y1) = range(ky, h);
            for kx in 0..3 {
                let (x0, x1) = range(kx, w);
                let row = ((ic * 9) + ky * 3 + kx) * p;
                for s in 0..n {
                    let base = gx.idx(s, ic, 0, 0);
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let src = row + s * hw + y * w;
                        let dst = base + iy * w;
                        for (g, v) in gx.data[dst + x0 + kx - 1..dst + x1 + kx - 1]
                            .iter_mut()
                            .zip(&cols[src + x0..src + x1])
                        {
                            *g += v;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Output rows/cols for which kernel offset `k` reads inside the input.
#[inline]
fn range(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1.min(len), len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

impl Parameterized for Conv3x3 {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
