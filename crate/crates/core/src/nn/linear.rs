use serde::{Deserialize, Serialize};

use super::{join, Param, Parameterized};
use crate::rng::Rng;

/// Fully-connected layer `y = W x + b` on row-major `(n, in)` batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out][in]`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: Param::uniform(in_dim * out_dim, in_dim, rng),
            bias: Param::zeros(out_dim),
        }
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight.value[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias.value[o]
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.chunks(self.in_dim).flat_map(|r| self.forward_one(r)).collect()
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let n = x.len() / self.in_dim;
        let mut gx = vec![0.0; x.len()];
        for i in 0..n {
            let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
            let gi = &grad_out[i * self.out_dim..(i + 1) * self.out_dim];
            let gxi = &mut gx[i * self.in_dim..(i + 1) * self.in_dim];
            for (o, &g) in gi.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                self.bias.grad[o] += g;
                let row = o * self.in_dim;
                for k in 0..self.in_dim {
                    self.weight.grad[row + k] += g * xi[k];
                    gxi[k] += g * self.weight.value[row + k];
                }
            }
        }
        gx
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
