use serde::{Deserialize, Serialize};

use super::{join, Param, Parameterized, Tensor4};

/// Per-channel batch normalization.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running averages as `running = momentum·running + (1 − momentum)·batch`;
/// inference mode uses the running averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps: 1e-5,
        }
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Tensor4 {
        let mut y = x.clone();
        let hw = x.h * x.w;
        for n in 0..x.n {
            for c in 0..x.c {
                let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
                let (g, b, m) = (self.gamma.value[c], self.beta.value[c], self.running_mean[c]);
                let base = x.idx(n, c, 0, 0);
                for v in &mut y.data[base..base + hw] {
                    *v = g * (*v - m) * inv + b;
                }
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> (Tensor4, BnCache) {
        let hw = x.h * x.w;
        let m = (x.n * hw) as f64;
        let mut y = x.clone();
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; x.c];
        for c in 0..x.c {
            let mut mean = 0.0;
            for n in 0..x.n {
                let base = x.idx(n, c, 0, 0);
                mean += x.data[base..base + hw].iter().sum::<f64>();
            }
            mean /= m;
            let mut var = 0.0;
            for n in 0..x.n {
                let base = x.idx(n, c, 0, 0);
                var += x.data[base..base + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            var /= m;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = inv;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for n in 0..x.n {
                let base = x.idx(n, c, 0, 0);
                for i in base..base + hw {
                    let xh = (x.data[i] - mean) * inv;
                    xhat[i] = xh;
                    y.data[i] = g * xh + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean[c] = self.momentum * self.running_mean[c] + (1.0 - self.momentum) * mean;
            self.running_var[c] = self.momentum * self.running_var[c] + (1.0 - self.momentum) * unbiased;
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BnCache, grad_out: &Tensor4) -> Tensor4 {
        let (nn, c_, hw) = (grad_out.n, grad_out.c, grad_out.h * grad_out.w);
        let m = (nn * hw) as f64;
        let mut gx = grad_out.clone();
        for c in 0..c_ {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for n in 0..nn {
                let base = grad_out.idx(n, c, 0, 0);
                for i in base..base + hw {
                    sum_g += grad_out.data[i];
                    sum_gx += grad_out.data[i] * cache.xhat[i];
                }
            }
            self.beta.grad[c] += sum_g;
            self.gamma.grad[c] += sum_gx;
            let g = self.gamma.value[c];
            let k = g * cache.inv_std[c] / m;
            for n in 0..nn {
                let base = grad_out.idx(n, c, 0, 0);
                for i in base..base + hw {
                    gx.data[i] = k * (m * grad_out.data[i] - sum_g - cache.xhat[i] * sum_gx);
                }
            }
        }
        gx
    }
}

impl Parameterized for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
