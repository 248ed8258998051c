//! Minimal double-precision layers with hand-written backward passes.
//!
//! Layers accumulate parameter gradients into [`Param::grad`]; callers zero
//! them between steps. Activations are batch-major `(n, c, h, w)` arrays.

mod conv;
mod layers;
mod linear;
mod norm;

pub use conv::Conv3x3;
pub use layers::{ConvBlock, ConvBlockCache, ConvStack, ConvStackCache, MaxPool2x2, MaxPoolCache};
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Batch-major 4-D activation array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

/// A trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    /// He-style normal init with the given fan-in.
    pub fn he(n: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let sd = (2.0 / fan_in as f64).sqrt();
        Self::new(crate::rng::standard_normal(rng, n).into_iter().map(|v| sd * v).collect())
    }

    /// Uniform `±1/sqrt(fan_in)` init.
    pub fn uniform(n: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let b = 1.0 / (fan_in as f64).sqrt();
        Self::new((0..n).map(|_| rng.random_range(-b..b)).collect())
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Anything owning named trainable parameters.
pub trait Parameterized {
    /// Visit every parameter in a fixed order.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn relu_forward(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &[f64], grad: &mut [f64]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}
