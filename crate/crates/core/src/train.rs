//! Base-class training loop, optimizer, schedule and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, VfdError};
use crate::feature::{LabeledDataset, Shape3};
use crate::loss::LossBreakdown;
use crate::model::{PlainVae, StepNoise, StepSettings, VfdModel};
use crate::nn::{Parameterized, Tensor4};
use crate::rng::{standard_normal, stream};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub alpha: f64,
    pub beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Augmented samples per instance per step feeding the augmented loss.
    pub aug_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            decay_epochs: vec![40, 80],
            decay_factor: 0.1,
            alpha: 4.0,
            beta: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            aug_samples: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VfdError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.decay_factor > 0.0 && self.adam_eps > 0.0) {
            return bad("learning_rate, decay_factor and adam_eps must be positive");
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs must be strictly increasing");
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("decay_epochs must be below epochs");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam moment coefficients must lie in [0, 1)");
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.weight_decay < 0.0 {
            return bad("alpha, beta and weight_decay must be non-negative");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

/// Adam moments in parameter-visit order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn update<P: Parameterized + ?Sized>(&mut self, model: &mut P, lr: f64, config: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let scale = match config.grad_clip {
            Some(c) => {
                let mut sq = 0.0;
                model.visit_params("", &mut |_, p| sq += p.grad.iter().map(|g| g * g).sum::<f64>());
                let norm = sq.sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params("", &mut |_, p| {
            if ms.len() <= i {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for k in 0..p.value.len() {
                let g = p.grad[k] * scale + config.weight_decay * p.value[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                p.value[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + config.adam_eps);
            }
            i += 1;
        });
    }
}

/// One history record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub optimizer: Adam,
    pub running: LossBreakdown,
    /// Master seed; epoch `e` draws from the substream `(seed, "train", e)`.
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            lr: config.lr_at(0),
            optimizer: Adam::default(),
            running: LossBreakdown::default(),
            seed: config.seed,
            history: Vec::new(),
        }
    }
}

fn batch_tensor(model: &VfdModel, data: &LabeledDataset, idx: &[usize]) -> Result<Tensor4> {
    let inputs: Vec<_> = idx.iter().map(|&i| &data.items[i].input).collect();
    model.backbone.batch(&inputs)
}

fn check_labels(data: &LabeledDataset, n_classes: usize) -> Result<()> {
    for it in &data.items {
        if it.label >= n_classes {
            return Err(VfdError::LabelOutOfRange {
                label: it.label,
                n_classes,
            });
        }
    }
    Ok(())
}

/// Runs the remaining epochs of `config`, calling `on_epoch` after each.
pub fn train_with<F>(
    model: &mut VfdModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&EpochRecord, &VfdModel, &TrainState) -> Result<()>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(VfdError::EmptyInput("training dataset".into()));
    }
    check_labels(data, model.n_classes)?;
    let n = data.len();
    let d = model.latent_dim();
    let settings = StepSettings {
        alpha: config.alpha,
        beta: config.beta,
        dataset_size: n,
    };
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let lr = config.lr_at(epoch);
        state.lr = lr;
        let mut rng = stream(state.seed, "train", epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        let mut steps = 0;
        for idx in order.chunks(config.batch_size) {
            let x = batch_tensor(model, data, idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.items[i].label).collect();
            let noise = StepNoise::sample(idx.len(), d, config.aug_samples, &mut rng);
            model.zero_grad();
            let bd = model.train_step(&x, &labels, &noise, settings, true)?;
            state.optimizer.update(model, lr, config);
            acc.accumulate(&bd, idx.len() as f64 / n as f64);
            steps += 1;
        }
        // recompute the aggregates so the logged identities hold exactly
        let loss = LossBreakdown::new(
            acc.l_cls,
            acc.recon,
            (acc.kl_mi, acc.kl_tc, acc.kl_dim),
            acc.l_aug,
            config.alpha,
            config.beta,
        );
        let rec = EpochRecord { epoch, lr, steps, loss };
        state.running = loss;
        state.epoch += 1;
        state.history.push(rec.clone());
        on_epoch(&rec, model, state)?;
    }
    Ok(())
}

/// Trains from scratch and returns the final state.
pub fn train(model: &mut VfdModel, data: &LabeledDataset, config: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(config);
    train_with(model, data, config, &mut state, |_, _, _| Ok(()))?;
    Ok(state)
}

/// Trains the no-disentanglement VAE on backbone feature maps of `data`.
pub fn train_plain_vae(
    vae: &mut PlainVae,
    model: &VfdModel,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<Vec<(f64, f64)>> {
    config.validate()?;
    if data.is_empty() {
        return Err(VfdError::EmptyInput("training dataset".into()));
    }
    let n = data.len();
    let d = vae.latent_dim();
    let mut opt = Adam::default();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut rng = stream(config.seed, "plain-vae", epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut r_acc, mut k_acc) = (0.0, 0.0);
        for idx in order.chunks(config.batch_size) {
            let x = batch_tensor(model, data, idx)?;
            let feats = model.backbone.forward_eval(&x);
            let eps = standard_normal(&mut rng, idx.len() * d);
            vae.zero_grad();
            let (r, k) = vae.train_step(&feats, &eps, true)?;
            opt.update(vae, lr, config);
            let w = idx.len() as f64 / n as f64;
            r_acc += w * r;
            k_acc += w * k;
        }
        history.push((r_acc, k_acc));
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: String,
    pub model: VfdModel,
    pub state: TrainState,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &VfdModel, state: &TrainState, config_digest: &str) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_digest: config_digest.to_string(),
        model: model.clone(),
        state: state.clone(),
    };
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, &ck)?;
    Ok(())
}

/// Loaded checkpoint plus a warning when its digest differs from the expected one.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: VfdModel,
    pub state: TrainState,
    pub config_digest: String,
    pub digest_warning: Option<String>,
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected_digest: Option<&str>) -> Result<LoadedCheckpoint> {
    let text = std::fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(VfdError::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut ck: Checkpoint = serde_json::from_value(raw)?;
    ck.model.zero_grad();
    let digest_warning = match expected_digest {
        Some(e) if e != ck.config_digest => Some(format!(
            "checkpoint config digest {} differs from current {}",
            ck.config_digest, e
        )),
        _ => None,
    };
    Ok(LoadedCheckpoint {
        model: ck.model,
        state: ck.state,
        config_digest: ck.config_digest,
        digest_warning,
    })
}

/// Loads a checkpoint and requires a specific model input shape.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    input_shape: Shape3,
    expected_digest: Option<&str>,
) -> Result<LoadedCheckpoint> {
    let ck = load_checkpoint(path, expected_digest)?;
    if ck.model.input_shape() != input_shape {
        return Err(shape_err(input_shape, ck.model.input_shape()));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_schedule() {
        let c = TrainConfig::default();
        for e in 0..100 {
            let want = if e < 40 {
                0.001
            } else if e < 80 {
                0.0001
            } else {
                0.00001
            };
            assert!((c.lr_at(e) - want).abs() < 1e-18, "epoch {e}");
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                decay_epochs: vec![80, 40],
                ..ok.clone()
            },
            TrainConfig {
                decay_epochs: vec![40, 100],
                ..ok.clone()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        use crate::nn::{Param, Parameterized};
        struct One(Param);
        impl Parameterized for One {
            fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param)) {
                f("p", &mut self.0);
            }
        }
        let mut p = One(Param::new(vec![1.0, -1.0]));
        p.0.grad = vec![0.5, -3.0];
        let mut opt = Adam::default();
        opt.update(&mut p, 0.1, &TrainConfig::default());
        assert!((p.0.value[0] - 0.9).abs() < 1e-6);
        assert!((p.0.value[1] + 0.9).abs() < 1e-6);
    }
}
