//! The disentanglement model: backbone, posterior encoder, feature decoder
//! and base-class classifier, with a hand-derived backward pass.

use serde::{Deserialize, Serialize};

use crate::backbone::{pool_batch, pool_batch_backward, Backbone, ConvBackboneConfig, PoolMode};
use crate::error::{shape_err, Result, VfdError};
use crate::feature::{FeatureMap, Shape3};
use crate::loss::{cross_entropy, kl_decomposed, LatentStats, LossBreakdown};
use crate::nn::{join, ConvBlock, ConvStack, ConvStackCache, Linear, Param, Parameterized, Tensor4};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    #[default]
    Identity,
    Conv4,
}

/// How the squared reconstruction error is reduced over map entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub conv_backbone: ConvBackboneConfig,
    /// Channel width of every encoder and decoder conv block.
    pub width: usize,
    pub encoder_blocks: usize,
    /// Includes the final plain convolution back to the feature channels.
    pub decoder_blocks: usize,
    pub bn_momentum: f64,
    pub log_var_clamp: f64,
    pub pool: PoolMode,
    pub recon: ReconReduction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Identity,
            conv_backbone: ConvBackboneConfig::default(),
            width: 32,
            encoder_blocks: 3,
            decoder_blocks: 3,
            bn_momentum: 0.9,
            log_var_clamp: 10.0,
            pool: PoolMode::Average,
            recon: ReconReduction::Sum,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(VfdError::InvalidConfig("encoder/decoder need positive width and block counts".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(VfdError::InvalidConfig(format!("bn_momentum {} not in [0, 1)", self.bn_momentum)));
        }
        if self.log_var_clamp <= 0.0 || self.log_var_clamp.is_nan() {
            return Err(VfdError::InvalidConfig("log_var_clamp must be positive".into()));
        }
        Ok(())
    }
}

/// `z = z_I + z_V`, with `z_V` stored as the perturbation actually applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangledFeature {
    pub z_i: Vec<f64>,
    pub z_v: Vec<f64>,
    pub z: Vec<f64>,
}

impl DisentangledFeature {
    /// Adds `perturbation` to `z_i`. The stored `z_v` is the rounded
    /// difference `z − z_I`, so the residual `(z − z_I) − z_V` is exactly zero.
    pub fn compose(z_i: Vec<f64>, perturbation: &[f64]) -> Self {
        let z: Vec<f64> = z_i.iter().zip(perturbation).map(|(a, b)| a + b).collect();
        let z_v = z.iter().zip(&z_i).map(|(s, a)| s - a).collect();
        Self { z_i, z_v, z }
    }

    pub fn residual(&self) -> Vec<f64> {
        self.z.iter().zip(&self.z_i).zip(&self.z_v).map(|((z, a), b)| (z - a) - b).collect()
    }
}

/// Encoder and decoder shared by the disentanglement model and the plain VAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalCore {
    pub feature_shape: Shape3,
    pub latent_dim: usize,
    pub width: usize,
    pub log_var_clamp: f64,
    pub encoder: ConvStack,
    pub mu_head: Linear,
    pub log_var_head: Linear,
    pub dec_fc: Linear,
    pub decoder: ConvStack,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    conv: ConvStackCache,
    hidden: Vec<f64>,
    raw_log_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    z: Vec<f64>,
    conv: ConvStackCache,
}

impl VariationalCore {
    pub fn new(feature_shape: Shape3, latent_dim: usize, config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = feature_shape;
        if c * h * w == 0 || latent_dim == 0 {
            return Err(VfdError::InvalidConfig(format!("empty feature shape {feature_shape:?}")));
        }
        let wd = config.width;
        let m = config.bn_momentum;
        let encoder = ConvStack {
            blocks: (0..config.encoder_blocks)
                .map(|i| ConvBlock::new(if i == 0 { c } else { wd }, wd, true, true, false, m, rng))
                .collect(),
        };
        let flat = wd * h * w;
        let mu_head = Linear::new(flat, latent_dim, rng);
        let log_var_head = Linear::new(flat, latent_dim, rng);
        let dec_fc = Linear::new(latent_dim, flat, rng);
        let decoder = ConvStack {
            blocks: (0..config.decoder_blocks)
                .map(|i| {
                    let last = i + 1 == config.decoder_blocks;
                    ConvBlock::new(wd, if last { c } else { wd }, !last, !last, false, m, rng)
                })
                .collect(),
        };
        Ok(Self {
            feature_shape,
            latent_dim,
            width: wd,
            log_var_clamp: config.log_var_clamp,
            encoder,
            mu_head,
            log_var_head,
            dec_fc,
            decoder,
        })
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if (x.c, x.h, x.w) != self.feature_shape {
            return Err(shape_err(self.feature_shape, (x.c, x.h, x.w)));
        }
        Ok(())
    }

    fn clamp(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x.clamp(-self.log_var_clamp, self.log_var_clamp)).collect()
    }

    fn split_stats(&self, mu: Vec<f64>, log_var: Vec<f64>) -> Vec<LatentStats> {
        let d = self.latent_dim;
        mu.chunks(d)
            .zip(log_var.chunks(d))
            .map(|(m, l)| LatentStats {
                mu: m.to_vec(),
                log_var: l.to_vec(),
            })
            .collect()
    }

    pub fn encode_eval(&self, x: &Tensor4) -> Result<Vec<LatentStats>> {
        self.check_input(x)?;
        let h = self.encoder.forward_eval(x);
        let mu = self.mu_head.forward(&h.data);
        let lv = self.clamp(&self.log_var_head.forward(&h.data));
        Ok(self.split_stats(mu, lv))
    }

    /// Returns row-major `(n, d)` means and clamped log-variances.
    pub fn encode_train(&mut self, x: &Tensor4) -> Result<(Vec<f64>, Vec<f64>, EncodeCache)> {
        self.check_input(x)?;
        let (h, conv) = self.encoder.forward_train(x);
        let mu = self.mu_head.forward(&h.data);
        let raw = self.log_var_head.forward(&h.data);
        let lv = self.clamp(&raw);
        let cache = EncodeCache {
            conv,
            hidden: h.data,
            raw_log_var: raw,
        };
        Ok((mu, lv, cache))
    }

    pub fn encode_backward(&mut self, cache: &EncodeCache, g_mu: &[f64], g_log_var: &[f64]) -> Tensor4 {
        let c = self.log_var_clamp;
        // the clamp passes gradient only strictly inside its bounds
        let g_raw: Vec<f64> = g_log_var
            .iter()
            .zip(&cache.raw_log_var)
            .map(|(g, r)| if r.abs() < c { *g } else { 0.0 })
            .collect();
        let mut gh = self.mu_head.backward(&cache.hidden, g_mu);
        let gh2 = self.log_var_head.backward(&cache.hidden, &g_raw);
        gh.iter_mut().zip(&gh2).for_each(|(a, b)| *a += b);
        let (_, h, w) = self.feature_shape;
        let n = g_mu.len() / self.latent_dim;
        let gh = Tensor4::from_vec(n, self.width, h, w, gh);
        self.encoder.backward(&cache.conv, &gh)
    }

    fn unflatten(&self, fc: Vec<f64>, n: usize) -> Tensor4 {
        let (_, h, w) = self.feature_shape;
        Tensor4::from_vec(n, self.width, h, w, fc)
    }

    /// Decodes row-major `(n, d)` latents in inference mode.
    pub fn decode_eval(&self, z: &[f64]) -> Tensor4 {
        let n = z.len() / self.latent_dim;
        let fc = self.dec_fc.forward(z);
        self.decoder.forward_eval(&self.unflatten(fc, n))
    }

    pub fn decode_train(&mut self, z: &[f64]) -> (Tensor4, DecodeCache) {
        let n = z.len() / self.latent_dim;
        let fc = self.dec_fc.forward(z);
        let (y, conv) = self.decoder.forward_train(&self.unflatten(fc, n));
        (y, DecodeCache { z: z.to_vec(), conv })
    }

    /// Returns the gradient w.r.t. the decoded latents.
    pub fn decode_backward(&mut self, cache: &DecodeCache, g_out: &Tensor4) -> Vec<f64> {
        let g = self.decoder.backward(&cache.conv, g_out);
        self.dec_fc.backward(&cache.z, &g.data)
    }
}

impl Parameterized for VariationalCore {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.mu_head.visit_params(&join(prefix, "mu_head"), f);
        self.log_var_head.visit_params(&join(prefix, "log_var_head"), f);
        self.dec_fc.visit_params(&join(prefix, "dec_fc"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }
}

/// Noise consumed by one training step, injectable for tests.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    /// `(n, d)` draws for `z_V` in the reconstruction path.
    pub eps_v: Vec<f64>,
    /// `(n_aug, n, d)` draws for the augmented classification loss.
    pub eps_aug: Vec<f64>,
}

impl StepNoise {
    pub fn sample(n: usize, d: usize, n_aug: usize, rng: &mut Rng) -> Self {
        Self {
            eps_v: crate::rng::standard_normal(rng, n * d),
            eps_aug: crate::rng::standard_normal(rng, n_aug * n * d),
        }
    }
}

/// Loss weights and estimator settings for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub alpha: f64,
    pub beta: f64,
    pub dataset_size: usize,
}

/// Per-instance embedding used at fine-tuning time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub z_i: Vec<f64>,
    pub stats: LatentStats,
}

impl Embedding {
    /// The deterministic feature `z_I + μ` used for originals and queries.
    pub fn feature(&self) -> Vec<f64> {
        self.z_i.iter().zip(&self.stats.mu).map(|(a, b)| a + b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfdModel {
    pub config: ModelConfig,
    pub n_classes: usize,
    pub backbone: Backbone,
    pub core: VariationalCore,
    pub classifier: Linear,
}

fn mean_rows(v: &[f64], rows: usize) -> f64 {
    v.iter().sum::<f64>() / rows as f64
}

impl VfdModel {
    pub fn new(config: &ModelConfig, input_shape: Shape3, n_classes: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if n_classes == 0 {
            return Err(VfdError::InvalidConfig("model needs at least one base class".into()));
        }
        let backbone = match config.backbone {
            BackboneKind::Identity => Backbone::identity(input_shape),
            BackboneKind::Conv4 => Backbone::conv4(input_shape, &config.conv_backbone, rng)?,
        };
        let feature_shape = backbone.output_shape();
        // z_I and z_V are added, so the latent size is the channel count
        let d = feature_shape.0;
        let core = VariationalCore::new(feature_shape, d, config, rng)?;
        let classifier = Linear::new(d, n_classes, rng);
        Ok(Self {
            config: config.clone(),
            n_classes,
            backbone,
            core,
            classifier,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.core.latent_dim
    }

    pub fn input_shape(&self) -> Shape3 {
        self.backbone.input_shape()
    }

    pub fn feature_shape(&self) -> Shape3 {
        self.core.feature_shape
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(VfdError::LengthMismatch {
                expected: self.latent_dim(),
                found: z.len(),
            });
        }
        Ok(())
    }

    fn map_tensor(&self, x: &FeatureMap) -> Result<Tensor4> {
        if x.shape != self.feature_shape() {
            return Err(shape_err(self.feature_shape(), x.shape));
        }
        let (c, h, w) = x.shape;
        Ok(Tensor4::from_vec(1, c, h, w, x.values.clone()))
    }

    pub fn extract(&self, input: &FeatureMap) -> Result<FeatureMap> {
        self.backbone.extract(input)
    }

    pub fn encode(&self, x: &FeatureMap) -> Result<LatentStats> {
        let t = self.map_tensor(x)?;
        Ok(self.core.encode_eval(&t)?.remove(0))
    }

    pub fn decode(&self, z: &[f64]) -> Result<FeatureMap> {
        self.check_latent(z)?;
        let y = self.core.decode_eval(z);
        FeatureMap::new(self.feature_shape(), y.data)
    }

    pub fn classify(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        Ok(self.classifier.forward_one(z))
    }

    /// Inference-mode `(z_I, μ, log σ²)` for a batch of inputs.
    pub fn embed(&self, inputs: &[&FeatureMap]) -> Result<Vec<Embedding>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.backbone.batch(inputs)?;
        self.embed_feature_maps(&self.backbone.forward_eval(&x))
    }

    /// Embeddings of maps that are already in feature space.
    pub fn embed_feature_maps(&self, feats: &Tensor4) -> Result<Vec<Embedding>> {
        let z_i = pool_batch(feats, self.config.pool);
        let stats = self.core.encode_eval(feats)?;
        Ok(z_i
            .chunks(self.latent_dim())
            .zip(stats)
            .map(|(z, s)| Embedding { z_i: z.to_vec(), stats: s })
            .collect())
    }

    /// Embeds a large set in fixed-size chunks to bound memory.
    pub fn embed_all(&self, inputs: &[&FeatureMap]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(256) {
            out.extend(self.embed(chunk)?);
        }
        Ok(out)
    }

    /// Single-instance decomposition with injected noise.
    pub fn disentangle(&self, input: &FeatureMap, eps: &[f64]) -> Result<DisentangledFeature> {
        let e = self.embed(&[input])?.remove(0);
        let z_v = crate::loss::reparameterize(&e.stats, eps)?;
        Ok(DisentangledFeature::compose(e.z_i, &z_v))
    }

    /// Training-mode forward pass over one batch; with `backward` set,
    /// accumulates gradients of the total loss into every parameter.
    pub fn train_step(
        &mut self,
        inputs: &Tensor4,
        labels: &[usize],
        noise: &StepNoise,
        settings: StepSettings,
        backward: bool,
    ) -> Result<LossBreakdown> {
        let m = inputs.n;
        let d = self.latent_dim();
        if m == 0 {
            return Err(VfdError::EmptyInput("training batch".into()));
        }
        if labels.len() != m {
            return Err(VfdError::LengthMismatch {
                expected: m,
                found: labels.len(),
            });
        }
        if noise.eps_v.len() != m * d || noise.eps_aug.len() % (m * d) != 0 {
            return Err(VfdError::LengthMismatch {
                expected: m * d,
                found: noise.eps_v.len(),
            });
        }
        let n_aug = noise.eps_aug.len() / (m * d);
        let mf = m as f64;

        let (x, bb_cache) = self.backbone.forward_train(inputs);
        let z_i = pool_batch(&x, self.config.pool);
        let (mu, lv, enc_cache) = self.core.encode_train(&x)?;
        let sd: Vec<f64> = lv.iter().map(|l| (0.5 * l).exp()).collect();

        // reconstruction path
        let z_v: Vec<f64> = (0..m * d).map(|k| mu[k] + sd[k] * noise.eps_v[k]).collect();
        let z: Vec<f64> = z_i.iter().zip(&z_v).map(|(a, b)| a + b).collect();
        let (x_hat, dec_cache) = self.core.decode_train(&z);
        let per_entry = match self.config.recon {
            ReconReduction::Sum => 1.0,
            ReconReduction::Mean => 1.0 / x.sample_len() as f64,
        };
        let recon = x.data.iter().zip(&x_hat.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * per_entry / mf;

        let stats: Vec<LatentStats> = self.core.split_stats(mu.clone(), lv.clone());
        let samples: Vec<Vec<f64>> = z_v.chunks(d).map(<[f64]>::to_vec).collect();
        let kl = kl_decomposed(&stats, &samples, settings.dataset_size)?;

        // class-specific path
        let logits = self.classifier.forward(&z_i);
        let mut l_cls = 0.0;
        let mut g_logits = vec![0.0; logits.len()];
        for (i, &y) in labels.iter().enumerate() {
            let k = self.n_classes;
            let (l, g) = cross_entropy(&logits[i * k..(i + 1) * k], y)?;
            l_cls += l;
            for (a, b) in g_logits[i * k..(i + 1) * k].iter_mut().zip(g) {
                *a = b / mf;
            }
        }
        l_cls /= mf;

        // augmented path
        let mut l_aug = 0.0;
        let mut aug_inputs = Vec::with_capacity(n_aug);
        for a in 0..n_aug {
            let eps = &noise.eps_aug[a * m * d..(a + 1) * m * d];
            let zt: Vec<f64> = (0..m * d).map(|k| z_i[k] + mu[k] + sd[k] * eps[k]).collect();
            let lg = self.classifier.forward(&zt);
            let k = self.n_classes;
            let mut g_lg = vec![0.0; lg.len()];
            for (i, &y) in labels.iter().enumerate() {
                let (l, g) = cross_entropy(&lg[i * k..(i + 1) * k], y)?;
                l_aug += l;
                for (p, q) in g_lg[i * k..(i + 1) * k].iter_mut().zip(g) {
                    *p = q / (mf * n_aug as f64);
                }
            }
            aug_inputs.push((zt, g_lg));
        }
        if n_aug > 0 {
            l_aug /= mf * n_aug as f64;
        }

        let bd = LossBreakdown::new(
            l_cls,
            recon,
            (kl.kl_mi, kl.kl_tc, kl.kl_dim),
            l_aug,
            settings.alpha,
            settings.beta,
        );
        if let Some((term, value)) = bd.non_finite() {
            return Err(VfdError::NonFiniteLoss { term, value });
        }
        if !backward {
            return Ok(bd);
        }

        let mut g_zi = self.classifier.backward(&z_i, &g_logits);
        let mut g_mu = vec![0.0; m * d];
        let mut g_lv = vec![0.0; m * d];
        for (a, (zt, g_lg)) in aug_inputs.iter().enumerate() {
            let scaled: Vec<f64> = g_lg.iter().map(|g| g * settings.beta).collect();
            let g_zt = self.classifier.backward(zt, &scaled);
            let eps = &noise.eps_aug[a * m * d..(a + 1) * m * d];
            for k in 0..m * d {
                g_zi[k] += g_zt[k];
                g_mu[k] += g_zt[k];
                g_lv[k] += g_zt[k] * 0.5 * sd[k] * eps[k];
            }
        }

        let coef = 2.0 * per_entry / mf;
        let g_xhat = Tensor4::from_vec(
            m,
            x_hat.c,
            x_hat.h,
            x_hat.w,
            x_hat.data.iter().zip(&x.data).map(|(p, q)| coef * (p - q)).collect(),
        );
        let g_z = self.core.decode_backward(&dec_cache, &g_xhat);
        let kg = kl.backward(&stats, &samples, (1.0, settings.alpha, 1.0));
        for i in 0..m {
            for j in 0..d {
                let k = i * d + j;
                g_zi[k] += g_z[k];
                let g_zv = g_z[k] + kg.samples[i][j];
                g_mu[k] += g_zv + kg.mu[i][j];
                g_lv[k] += g_zv * 0.5 * sd[k] * noise.eps_v[k] + kg.log_var[i][j];
            }
        }
        let g_x_enc = self.core.encode_backward(&enc_cache, &g_mu, &g_lv);

        if self.backbone.is_trainable() {
            let mut g_x = pool_batch_backward(&x, self.config.pool, &g_zi);
            for ((g, e), (p, q)) in g_x.data.iter_mut().zip(&g_x_enc.data).zip(x.data.iter().zip(&x_hat.data)) {
                // the feature map is also the reconstruction target
                *g += e + coef * (p - q);
            }
            self.backbone.backward(&bb_cache, &g_x);
        }
        Ok(bd)
    }
}

impl Parameterized for VfdModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        self.core.visit_params(prefix, f);
        self.classifier.visit_params(&join(prefix, "classifier"), f);
    }
}

/// Plain VAE over whole feature maps, with no class-specific split; the
/// no-disentanglement baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainVae {
    pub recon: ReconReduction,
    pub core: VariationalCore,
}

impl PlainVae {
    pub fn new(feature_shape: Shape3, config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            recon: config.recon,
            core: VariationalCore::new(feature_shape, feature_shape.0, config, rng)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.core.latent_dim
    }

    /// Reconstruction plus closed-form KL; returns `(recon, kl)`.
    pub fn train_step(&mut self, x: &Tensor4, eps: &[f64], backward: bool) -> Result<(f64, f64)> {
        let m = x.n;
        let d = self.latent_dim();
        if m == 0 {
            return Err(VfdError::EmptyInput("training batch".into()));
        }
        if eps.len() != m * d {
            return Err(VfdError::LengthMismatch {
                expected: m * d,
                found: eps.len(),
            });
        }
        let mf = m as f64;
        let (mu, lv, enc_cache) = self.core.encode_train(x)?;
        let sd: Vec<f64> = lv.iter().map(|l| (0.5 * l).exp()).collect();
        let z: Vec<f64> = (0..m * d).map(|k| mu[k] + sd[k] * eps[k]).collect();
        let (x_hat, dec_cache) = self.core.decode_train(&z);
        let per_entry = match self.recon {
            ReconReduction::Sum => 1.0,
            ReconReduction::Mean => 1.0 / x.sample_len() as f64,
        };
        let recon = x.data.iter().zip(&x_hat.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * per_entry / mf;
        let kl = mean_rows(
            &(0..m * d)
                .map(|k| 0.5 * (mu[k] * mu[k] + lv[k].exp() - 1.0 - lv[k]))
                .collect::<Vec<_>>(),
            m,
        );
        if !recon.is_finite() {
            return Err(VfdError::NonFiniteLoss {
                term: "recon",
                value: recon,
            });
        }
        if !kl.is_finite() {
            return Err(VfdError::NonFiniteLoss { term: "kl", value: kl });
        }
        if backward {
            let coef = 2.0 * per_entry / mf;
            let g_xhat = Tensor4::from_vec(
                m,
                x_hat.c,
                x_hat.h,
                x_hat.w,
                x_hat.data.iter().zip(&x.data).map(|(p, q)| coef * (p - q)).collect(),
            );
            let g_z = self.core.decode_backward(&dec_cache, &g_xhat);
            let mut g_mu = vec![0.0; m * d];
            let mut g_lv = vec![0.0; m * d];
            for k in 0..m * d {
                g_mu[k] = g_z[k] + mu[k] / mf;
                g_lv[k] = g_z[k] * 0.5 * sd[k] * eps[k] + 0.5 * (lv[k].exp() - 1.0) / mf;
            }
            self.core.encode_backward(&enc_cache, &g_mu, &g_lv);
        }
        Ok((recon, kl))
    }

    /// Posterior sample decoded back to a feature map, per row of `eps`.
    pub fn generate(&self, x: &Tensor4, eps: &[f64]) -> Result<Tensor4> {
        let stats = self.core.encode_eval(x)?;
        let d = self.latent_dim();
        if eps.len() % (x.n * d).max(1) != 0 {
            return Err(VfdError::LengthMismatch {
                expected: x.n * d,
                found: eps.len(),
            });
        }
        let reps = eps.len() / (x.n * d).max(1);
        let mut z = Vec::with_capacity(eps.len());
        for r in 0..reps {
            for (i, s) in stats.iter().enumerate() {
                let e = &eps[(r * x.n + i) * d..(r * x.n + i + 1) * d];
                z.extend(crate::loss::reparameterize(s, e)?);
            }
        }
        Ok(self.core.decode_eval(&z))
    }
}

impl Parameterized for PlainVae {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.core.visit_params(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng::{seeded, standard_normal};

    fn small_config() -> ModelConfig {
        ModelConfig {
            width: 4,
            conv_backbone: ConvBackboneConfig {
                layers: 4,
                filters: 3,
                bn_momentum: 0.9,
            },
            ..Default::default()
        }
    }

    fn gradcheck(model: &VfdModel, x: &Tensor4, labels: &[usize]) {
        let mut rng = seeded(99);
        let noise = StepNoise::sample(x.n, model.latent_dim(), 1, &mut rng);
        let settings = StepSettings {
            alpha: 4.0,
            beta: 1.0,
            dataset_size: 40,
        };
        let report = check_gradients(model, 1e-4, 12, 1e-7, |m, bw| {
            m.train_step(x, labels, &noise, settings, bw).unwrap().total
        });
        for r in &report {
            assert!(r.max_rel_err < 1e-3, "{}: {}", r.name, r.max_rel_err);
            assert!(r.max_abs_grad > 0.0, "{} has zero gradient", r.name);
        }
    }

    #[test]
    fn gradients_identity_backbone() {
        let mut rng = seeded(1);
        let model = VfdModel::new(&small_config(), (3, 2, 2), 3, &mut rng).unwrap();
        let x = Tensor4::from_vec(4, 3, 2, 2, standard_normal(&mut rng, 48));
        gradcheck(&model, &x, &[0, 1, 2, 1]);
    }

    #[test]
    fn gradients_conv_backbone() {
        let mut rng = seeded(2);
        let cfg = ModelConfig {
            backbone: BackboneKind::Conv4,
            ..small_config()
        };
        let model = VfdModel::new(&cfg, (2, 16, 16), 3, &mut rng).unwrap();
        assert_eq!(model.feature_shape(), (3, 1, 1));
        let x = Tensor4::from_vec(4, 2, 16, 16, standard_normal(&mut rng, 4 * 512));
        gradcheck(&model, &x, &[2, 0, 1, 0]);
    }

    #[test]
    fn plain_vae_gradients() {
        let mut rng = seeded(3);
        let vae = PlainVae::new((3, 2, 2), &small_config(), &mut rng).unwrap();
        let x = Tensor4::from_vec(4, 3, 2, 2, standard_normal(&mut rng, 48));
        let eps = standard_normal(&mut rng, 12);
        let report = check_gradients(&vae, 1e-4, 12, 1e-7, |m, bw| {
            let (r, k) = m.train_step(&x, &eps, bw).unwrap();
            r + k
        });
        for r in &report {
            assert!(r.max_rel_err < 1e-3, "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn contracts() {
        let mut rng = seeded(4);
        let model = VfdModel::new(&small_config(), (3, 2, 2), 5, &mut rng).unwrap();
        let x = FeatureMap::new((3, 2, 2), standard_normal(&mut rng, 12)).unwrap();
        let s = model.encode(&x).unwrap();
        assert_eq!((s.mu.len(), s.log_var.len()), (3, 3));
        assert_eq!(model.encode(&x).unwrap(), s);
        assert!(model.encode(&FeatureMap::zeros((3, 1, 1))).is_err());
        assert_eq!(model.decode(&[0.1, 0.2, 0.3]).unwrap().shape, (3, 2, 2));
        assert!(model.decode(&[0.1]).is_err());
        assert_eq!(model.classify(&[0.0; 3]).unwrap().len(), 5);
        assert!(model.classify(&[0.0; 4]).is_err());
    }

    #[test]
    fn classify_is_affine() {
        let mut rng = seeded(5);
        let mut model = VfdModel::new(&small_config(), (3, 2, 2), 4, &mut rng).unwrap();
        let z = [0.3, -1.2, 2.0];
        let a = model.classify(&z).unwrap();
        let z2: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        let b = model.classify(&z2).unwrap();
        for k in 0..4 {
            let bias = model.classifier.bias.value[k];
            assert!(((b[k] - bias) - 2.0 * (a[k] - bias)).abs() < 1e-12);
            let w = &model.classifier.weight.value[k * 3..k * 3 + 3];
            let oracle: f64 = w.iter().zip(&z).map(|(p, q)| p * q).sum::<f64>() + bias;
            assert!((a[k] - oracle).abs() < 1e-12);
        }
        model.classifier.weight.value.iter_mut().for_each(|v| *v = 0.0);
        model.classifier.bias.value.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(model.classify(&z).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn disentangled_identity_is_exact() {
        let mut rng = seeded(6);
        let model = VfdModel::new(&small_config(), (3, 2, 2), 2, &mut rng).unwrap();
        for _ in 0..50 {
            let x = FeatureMap::new((3, 2, 2), standard_normal(&mut rng, 12)).unwrap();
            let f = model.disentangle(&x, &standard_normal(&mut rng, 3)).unwrap();
            assert!(f.residual().iter().all(|r| *r == 0.0));
            for k in 0..3 {
                assert_eq!(f.z[k], f.z_i[k] + f.z_v[k]);
            }
        }
    }
}
