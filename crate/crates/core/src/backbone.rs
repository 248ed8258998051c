//! Feature extractors and the pooling that yields `z_I`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, VfdError};
use crate::feature::{FeatureMap, Shape3};
use crate::nn::{ConvBlock, ConvStack, ConvStackCache, Param, Parameterized, Tensor4};
use crate::rng::Rng;

/// Spatial reduction used to obtain the class-specific feature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    #[default]
    Average,
    Max,
}

impl std::str::FromStr for PoolMode {
    type Err = VfdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            _ => Err(VfdError::Unknown {
                kind: "pool mode",
                value: s.to_string(),
            }),
        }
    }
}

/// Per-channel spatial reduction of a map to a length-`C` vector.
pub fn pool_class_feature(x: &FeatureMap, mode: PoolMode) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(VfdError::EmptyInput("feature map".into()));
    }
    Ok(pool_slice(&x.values, x.channels(), x.spatial(), mode))
}

fn pool_slice(values: &[f64], channels: usize, spatial: usize, mode: PoolMode) -> Vec<f64> {
    values
        .chunks(spatial)
        .take(channels)
        .map(|plane| match mode {
            PoolMode::Average => plane.iter().sum::<f64>() / spatial as f64,
            PoolMode::Max => plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

/// Pools every sample of a batch; returns row-major `(n, c)`.
pub fn pool_batch(x: &Tensor4, mode: PoolMode) -> Vec<f64> {
    x.data
        .chunks(x.sample_len())
        .flat_map(|s| pool_slice(s, x.c, x.h * x.w, mode))
        .collect()
}

/// Gradient of [`pool_batch`] w.r.t. its input.
pub fn pool_batch_backward(x: &Tensor4, mode: PoolMode, grad: &[f64]) -> Tensor4 {
    let hw = x.h * x.w;
    let mut gx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    for n in 0..x.n {
        for c in 0..x.c {
            let g = grad[n * x.c + c];
            let base = x.idx(n, c, 0, 0);
            match mode {
                PoolMode::Average => gx.data[base..base + hw].iter_mut().for_each(|v| *v = g / hw as f64),
                PoolMode::Max => {
                    // first maximal position receives the gradient
                    let plane = &x.data[base..base + hw];
                    let mut best = 0;
                    for (i, v) in plane.iter().enumerate() {
                        if *v > plane[best] {
                            best = i;
                        }
                    }
                    gx.data[base + best] = g;
                }
            }
        }
    }
    gx
}

/// Conv4-style extractor configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvBackboneConfig {
    pub layers: usize,
    pub filters: usize,
    pub bn_momentum: f64,
}

impl Default for ConvBackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            filters: 32,
            bn_momentum: 0.9,
        }
    }
}

/// Maps an input to the feature map `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Inputs already are feature maps; flat vectors become `(len, 1, 1)`.
    Identity { input_shape: Shape3 },
    /// conv3×3 → BN → ReLU → 2×2 max pool, repeated.
    Conv { input_shape: Shape3, stack: ConvStack },
}

/// Intermediate values of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache(Option<ConvStackCache>);

impl Backbone {
    pub fn identity(input_shape: Shape3) -> Self {
        Self::Identity { input_shape }
    }

    pub fn conv4(input_shape: Shape3, config: &ConvBackboneConfig, rng: &mut Rng) -> Result<Self> {
        if config.layers == 0 || config.filters == 0 {
            return Err(VfdError::InvalidConfig("backbone needs at least one layer and filter".into()));
        }
        let (mut h, mut w) = (input_shape.1, input_shape.2);
        for _ in 0..config.layers {
            h /= 2;
            w /= 2;
        }
        if h == 0 || w == 0 || input_shape.0 == 0 {
            return Err(VfdError::InvalidConfig(format!(
                "input {input_shape:?} too small for {} poolings",
                config.layers
            )));
        }
        let blocks = (0..config.layers)
            .map(|i| {
                let in_c = if i == 0 { input_shape.0 } else { config.filters };
                ConvBlock::new(in_c, config.filters, true, true, true, config.bn_momentum, rng)
            })
            .collect();
        Ok(Self::Conv {
            input_shape,
            stack: ConvStack { blocks },
        })
    }

    pub fn input_shape(&self) -> Shape3 {
        match self {
            Self::Identity { input_shape } | Self::Conv { input_shape, .. } => *input_shape,
        }
    }

    pub fn output_shape(&self) -> Shape3 {
        match self {
            Self::Identity { input_shape } => *input_shape,
            Self::Conv { input_shape, stack } => {
                let (mut h, mut w) = (input_shape.1, input_shape.2);
                for b in &stack.blocks {
                    if b.pool {
                        h /= 2;
                        w /= 2;
                    }
                }
                let c = stack.blocks.last().map_or(input_shape.0, |b| b.conv.out_c);
                (c, h, w)
            }
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Self::Conv { .. })
    }

    /// Brings an input into this backbone's declared input shape.
    fn conform(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let want = self.input_shape();
        if input.shape == want {
            Ok(input.clone())
        } else if input.shape.1 == 1 && input.shape.2 == 1 && input.len() == want.0 * want.1 * want.2 {
            input.reshape(want)
        } else {
            Err(shape_err(want, input.shape))
        }
    }

    /// Stacks inputs into a batch tensor, checking shapes.
    pub fn batch(&self, inputs: &[&FeatureMap]) -> Result<Tensor4> {
        let (c, h, w) = self.input_shape();
        let mut data = Vec::with_capacity(inputs.len() * c * h * w);
        for x in inputs {
            data.extend_from_slice(&self.conform(x)?.values);
        }
        Ok(Tensor4::from_vec(inputs.len(), c, h, w, data))
    }

    /// Inference-mode extraction of a single map.
    pub fn extract(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let x = self.batch(&[input])?;
        let y = self.forward_eval(&x);
        FeatureMap::new((y.c, y.h, y.w), y.data)
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Tensor4 {
        match self {
            Self::Identity { .. } => x.clone(),
            Self::Conv { stack, .. } => stack.forward_eval(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> (Tensor4, BackboneCache) {
        match self {
            Self::Identity { .. } => (x.clone(), BackboneCache(None)),
            Self::Conv { stack, .. } => {
                let (y, c) = stack.forward_train(x);
                (y, BackboneCache(Some(c)))
            }
        }
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &BackboneCache, grad_out: &Tensor4) -> Tensor4 {
        match (self, &cache.0) {
            (Self::Conv { stack, .. }, Some(c)) => stack.backward(c, grad_out),
            _ => grad_out.clone(),
        }
    }
}

impl Parameterized for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Self::Conv { stack, .. } = self {
            stack.visit_params(prefix, f);
        }
    }
}
