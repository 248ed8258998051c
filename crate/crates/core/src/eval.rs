//! Fine-tuning-stage harness: support augmentation, episode evaluation and
//! benchmark aggregation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{evaluate, fit_classifier, ClassifierConfig, ClassifierKind};
use crate::covariance::{sample_perturbation, PooledCovariance};
use crate::episode::{sample_episode, Episode};
use crate::error::{Result, VfdError};
use crate::feature::LabeledDataset;
use crate::model::{DisentangledFeature, Embedding, PlainVae, VfdModel};
use crate::nn::Tensor4;
use crate::rng::{standard_normal, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    None,
    Posterior,
    Prior,
    CovarianceTransfer,
    NoDisentanglement,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Posterior => "posterior",
            Self::Prior => "prior",
            Self::CovarianceTransfer => "covariance-transfer",
            Self::NoDisentanglement => "no-disentanglement",
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = VfdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "posterior" => Ok(Self::Posterior),
            "prior" => Ok(Self::Prior),
            "covariance-transfer" | "covariance" => Ok(Self::CovarianceTransfer),
            "no-disentanglement" => Ok(Self::NoDisentanglement),
            _ => Err(VfdError::Unknown {
                kind: "augmentation scheme",
                value: s.to_string(),
            }),
        }
    }
}

/// A support-augmentation recipe with any state it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationScheme {
    pub kind: SchemeKind,
    pub n_aug: usize,
    pub covariance: Option<PooledCovariance>,
    pub plain_vae: Option<PlainVae>,
}

impl AugmentationScheme {
    /// Schemes that need no extra state (none, posterior, prior).
    pub fn simple(kind: SchemeKind, n_aug: usize) -> Result<Self> {
        let s = Self {
            kind,
            n_aug,
            covariance: None,
            plain_vae: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn covariance_transfer(n_aug: usize, cov: PooledCovariance) -> Self {
        Self {
            kind: SchemeKind::CovarianceTransfer,
            n_aug,
            covariance: Some(cov),
            plain_vae: None,
        }
    }

    pub fn no_disentanglement(n_aug: usize, vae: PlainVae) -> Self {
        Self {
            kind: SchemeKind::NoDisentanglement,
            n_aug,
            covariance: None,
            plain_vae: Some(vae),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cov = self.kind == SchemeKind::CovarianceTransfer;
        if cov != self.covariance.is_some() {
            return Err(VfdError::InvalidConfig(if cov {
                "covariance-transfer scheme is missing its covariance state".into()
            } else {
                format!("{} scheme must not carry covariance state", self.kind.name())
            }));
        }
        if self.kind == SchemeKind::NoDisentanglement && self.plain_vae.is_none() {
            return Err(VfdError::InvalidConfig("no-disentanglement scheme is missing its VAE".into()));
        }
        Ok(())
    }
}

/// One feature fed to the episode classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedFeature {
    pub feature: Vec<f64>,
    pub label: usize,
    /// Index of the support item it came from.
    pub source: usize,
    pub original: bool,
    /// `z_I + z_V` decomposition for schemes that perturb `z_I`.
    pub parts: Option<DisentangledFeature>,
}

/// A support item as seen by [`augment_support`].
#[derive(Debug, Clone, Copy)]
pub struct SupportItem<'a> {
    pub input: &'a crate::feature::FeatureMap,
    pub embedding: &'a Embedding,
    pub label: usize,
}

/// Originals (`z_I + μ`) followed by `n_aug` augmentations per support item.
pub fn augment_support(
    model: &VfdModel,
    support: &[SupportItem<'_>],
    scheme: &AugmentationScheme,
    rng: &mut Rng,
) -> Result<Vec<AugmentedFeature>> {
    scheme.validate()?;
    let d = model.latent_dim();
    let mut out: Vec<AugmentedFeature> = support
        .iter()
        .enumerate()
        .map(|(i, s)| AugmentedFeature {
            feature: s.embedding.feature(),
            label: s.label,
            source: i,
            original: true,
            parts: None,
        })
        .collect();
    if scheme.kind == SchemeKind::None || scheme.n_aug == 0 {
        return Ok(out);
    }
    if let SchemeKind::NoDisentanglement = scheme.kind {
        let vae = scheme.plain_vae.as_ref().expect("validated");
        for (i, s) in support.iter().enumerate() {
            let x = model.extract(s.input)?;
            let (c, h, w) = x.shape;
            let t = Tensor4::from_vec(1, c, h, w, x.values);
            let eps = standard_normal(rng, scheme.n_aug * vae.latent_dim());
            let generated = vae.generate(&t, &eps)?;
            for e in model.embed_feature_maps(&generated)? {
                out.push(AugmentedFeature {
                    feature: e.feature(),
                    label: s.label,
                    source: i,
                    original: false,
                    parts: None,
                });
            }
        }
        return Ok(out);
    }
    for (i, s) in support.iter().enumerate() {
        let e = s.embedding;
        let sd = e.stats.std();
        for _ in 0..scheme.n_aug {
            let pert: Vec<f64> = match scheme.kind {
                SchemeKind::Posterior => {
                    let eps = standard_normal(rng, d);
                    (0..d).map(|k| e.stats.mu[k] + sd[k] * eps[k]).collect()
                }
                SchemeKind::Prior => standard_normal(rng, d),
                SchemeKind::CovarianceTransfer => {
                    let cov = scheme.covariance.as_ref().expect("validated");
                    if cov.dim != d {
                        return Err(VfdError::LengthMismatch {
                            expected: d,
                            found: cov.dim,
                        });
                    }
                    sample_perturbation(cov, rng)
                }
                SchemeKind::None | SchemeKind::NoDisentanglement => unreachable!(),
            };
            let parts = DisentangledFeature::compose(e.z_i.clone(), &pert);
            out.push(AugmentedFeature {
                feature: parts.z.clone(),
                label: s.label,
                source: i,
                original: false,
                parts: Some(parts),
            });
        }
    }
    Ok(out)
}

/// Episode protocol and classifier settings shared by all schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub n_query: usize,
    pub n_episodes: usize,
    pub n_aug: usize,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            n_query: 16,
            n_episodes: 600,
            n_aug: 5,
            classifier: ClassifierConfig::default(),
        }
    }
}

/// Novel-split data prepared for repeated episodes.
pub struct EvalData<'a> {
    pub model: &'a VfdModel,
    pub dataset: &'a LabeledDataset,
    pub embeddings: Vec<Embedding>,
    pub by_class: Vec<Vec<usize>>,
}

impl<'a> EvalData<'a> {
    /// Embeds every item once; inference mode makes this batch-independent.
    pub fn new(model: &'a VfdModel, dataset: &'a LabeledDataset) -> Result<Self> {
        dataset.validate()?;
        let inputs: Vec<_> = dataset.items.iter().map(|i| &i.input).collect();
        let embeddings = model.embed_all(&inputs)?;
        Ok(Self {
            model,
            dataset,
            embeddings,
            by_class: dataset.indices_by_class(),
        })
    }
}

/// Accuracy of one episode; all randomness comes from `(seed, index)`.
pub fn run_episode(
    data: &EvalData<'_>,
    scheme: &AugmentationScheme,
    classifier: ClassifierKind,
    config: &EvalConfig,
    seed: u64,
    index: u64,
) -> Result<f64> {
    let episode = sample_episode(
        &data.by_class,
        config.way,
        config.shot,
        config.n_query,
        &mut stream(seed, "episode", index),
    )?;
    episode_accuracy(data, &episode, scheme, classifier, config, seed, index)
}

pub fn episode_accuracy(
    data: &EvalData<'_>,
    episode: &Episode,
    scheme: &AugmentationScheme,
    classifier: ClassifierKind,
    config: &EvalConfig,
    seed: u64,
    index: u64,
) -> Result<f64> {
    let support: Vec<SupportItem<'_>> = episode
        .support
        .iter()
        .map(|&(i, l)| SupportItem {
            input: &data.dataset.items[i].input,
            embedding: &data.embeddings[i],
            label: l,
        })
        .collect();
    let feats = augment_support(data.model, &support, scheme, &mut stream(seed, "augmentation", index))?;
    let (x, y): (Vec<Vec<f64>>, Vec<usize>) = feats.into_iter().map(|f| (f.feature, f.label)).unzip();
    let head = fit_classifier(
        &x,
        &y,
        episode.way,
        classifier,
        &config.classifier,
        &mut stream(seed, "classifier", index),
    )?;
    let (qx, qy): (Vec<Vec<f64>>, Vec<usize>) = episode
        .query
        .iter()
        .map(|&(i, l)| (data.embeddings[i].feature(), l))
        .unzip();
    evaluate(&head, &qx, &qy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scheme: String,
    pub classifier: String,
    pub way: usize,
    pub shot: usize,
    pub n_query: usize,
    pub n_aug: usize,
    pub n_episodes: usize,
    pub mean: f64,
    pub ci95: f64,
    pub std: f64,
    pub seed: u64,
    pub accuracies: Vec<f64>,
    pub config_digest: Option<String>,
}

pub const LEDGER_HEADER: &str = "scheme,classifier,way,shot,n_episodes,mean,ci95,seed";

impl BenchmarkReport {
    /// Mean, population standard deviation and `1.96·std/√n`.
    pub fn summarize(accuracies: &[f64]) -> (f64, f64, f64) {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        (mean, std, 1.96 * std / n.sqrt())
    }

    pub fn ledger_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.4},{}",
            self.scheme, self.classifier, self.way, self.shot, self.n_episodes, self.mean, self.ci95, self.seed
        )
    }
}

/// Runs `n_episodes` independent episodes on up to `workers` threads
/// (0 = all cores). Results do not depend on scheduling.
pub fn run_benchmark(
    data: &EvalData<'_>,
    scheme: &AugmentationScheme,
    classifier: ClassifierKind,
    config: &EvalConfig,
    seed: u64,
    workers: usize,
) -> Result<BenchmarkReport> {
    if config.n_episodes == 0 {
        return Err(VfdError::InvalidConfig("n_episodes must be at least 1".into()));
    }
    scheme.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| VfdError::InvalidConfig(format!("worker pool: {e}")))?;
    let accuracies = pool.install(|| {
        (0..config.n_episodes as u64)
            .into_par_iter()
            .map(|i| run_episode(data, scheme, classifier, config, seed, i))
            .collect::<Result<Vec<f64>>>()
    })?;
    let (mean, std, ci95) = BenchmarkReport::summarize(&accuracies);
    Ok(BenchmarkReport {
        scheme: scheme.kind.name().to_string(),
        classifier: classifier.name().to_string(),
        way: config.way,
        shot: config.shot,
        n_query: config.n_query,
        n_aug: scheme.n_aug,
        n_episodes: config.n_episodes,
        mean,
        ci95,
        std,
        seed,
        accuracies,
        config_digest: None,
    })
}
