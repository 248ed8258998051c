use serde::{Deserialize, Serialize};

use super::{join, relu_backward, relu_forward, BatchNorm2d, BnCache, Conv3x3, Param, Parameterized, Tensor4};
use crate::rng::Rng;

/// 2×2 max pooling with floor division of odd sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxPool2x2;

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    in_shape: (usize, usize, usize, usize),
    argmax: Vec<usize>,
}

impl MaxPool2x2 {
    pub fn forward(x: &Tensor4) -> (Tensor4, MaxPoolCache) {
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
        let mut argmax = vec![0; out.data.len()];
        for n in 0..x.n {
            for c in 0..x.c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = x.idx(n, c, 2 * y + dy, 2 * xx + dx);
                                if x.data[i] > best {
                                    best = x.data[i];
                                    bi = i;
                                }
                            }
                        }
                        let o = out.idx(n, c, y, xx);
                        out.data[o] = best;
                        argmax[o] = bi;
                    }
                }
            }
        }
        let cache = MaxPoolCache {
            in_shape: (x.n, x.c, x.h, x.w),
            argmax,
        };
        (out, cache)
    }

    pub fn backward(cache: &MaxPoolCache, grad_out: &Tensor4) -> Tensor4 {
        let (n, c, h, w) = cache.in_shape;
        let mut gx = Tensor4::zeros(n, c, h, w);
        for (o, &i) in cache.argmax.iter().enumerate() {
            gx.data[i] += grad_out.data[o];
        }
        gx
    }
}

/// conv3×3 → [batch norm] → [ReLU] → [2×2 max pool]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv: Conv3x3,
    pub bn: Option<BatchNorm2d>,
    pub relu: bool,
    pub pool: bool,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    input: Tensor4,
    bn: Option<BnCache>,
    activated: Tensor4,
    pool: Option<MaxPoolCache>,
}

impl ConvBlock {
    pub fn new(in_c: usize, out_c: usize, norm: bool, relu: bool, pool: bool, momentum: f64, rng: &mut Rng) -> Self {
        Self {
            conv: Conv3x3::new(in_c, out_c, rng),
            bn: norm.then(|| BatchNorm2d::new(out_c, momentum)),
            relu,
            pool,
        }
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Tensor4 {
        let mut y = self.conv.forward(x);
        if let Some(bn) = &self.bn {
            y = bn.forward_eval(&y);
        }
        if self.relu {
            relu_forward(&mut y.data);
        }
        if self.pool {
            y = MaxPool2x2::forward(&y).0;
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> (Tensor4, ConvBlockCache) {
        let mut y = self.conv.forward(x);
        let mut bn_cache = None;
        if let Some(bn) = &mut self.bn {
            let (z, c) = bn.forward_train(&y);
            y = z;
            bn_cache = Some(c);
        }
        if self.relu {
            relu_forward(&mut y.data);
        }
        let activated = y.clone();
        let mut pool = None;
        if self.pool {
            let (p, c) = MaxPool2x2::forward(&y);
            y = p;
            pool = Some(c);
        }
        let cache = ConvBlockCache {
            input: x.clone(),
            bn: bn_cache,
            activated,
            pool,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &ConvBlockCache, grad_out: &Tensor4) -> Tensor4 {
        let mut g = match &cache.pool {
            Some(pc) => MaxPool2x2::backward(pc, grad_out),
            None => grad_out.clone(),
        };
        if self.relu {
            relu_backward(&cache.activated.data, &mut g.data);
        }
        if let (Some(bn), Some(bc)) = (&mut self.bn, &cache.bn) {
            g = bn.backward(bc, &g);
        }
        self.conv.backward(&cache.input, &g)
    }
}

impl Parameterized for ConvBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_params(&join(prefix, "bn"), f);
        }
    }
}

/// A sequence of conv blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStack {
    pub blocks: Vec<ConvBlock>,
}

pub type ConvStackCache = Vec<ConvBlockCache>;

impl ConvStack {
    pub fn forward_eval(&self, x: &Tensor4) -> Tensor4 {
        self.blocks.iter().fold(x.clone(), |h, b| b.forward_eval(&h))
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> (Tensor4, ConvStackCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, c) = b.forward_train(&h);
            caches.push(c);
            h = y;
        }
        (h, caches)
    }

    pub fn backward(&mut self, caches: &ConvStackCache, grad_out: &Tensor4) -> Tensor4 {
        let mut g = grad_out.clone();
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            g = b.backward(c, &g);
        }
        g
    }
}

impl Parameterized for ConvStack {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
    }
}
