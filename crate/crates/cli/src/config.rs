//! Run configuration: a TOML file with `data`, `model`, `train`, `eval` and
//! `analysis` sections. Precedence is flags > file > defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vfd_core::classifier::{ClassifierConfig, ClassifierKind, IterationUnit};
use vfd_core::eval::{EvalConfig, SchemeKind};
use vfd_core::feature::Shape3;
use vfd_core::model::ModelConfig;
use vfd_core::synth::SynthConfig;
use vfd_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_base_classes: usize,
    pub n_novel_classes: usize,
    pub latent_dim: usize,
    pub feature_shape: Shape3,
    pub shared_variation_scales: Option<Vec<f64>>,
    pub prototype_scale: Option<f64>,
    pub fine_grained_ratio: f64,
    pub base_per_class: usize,
    pub novel_per_class: usize,
    /// Feature files; relative paths resolve against the output directory.
    pub base_file: PathBuf,
    pub novel_file: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            n_base_classes: s.n_base_classes,
            n_novel_classes: s.n_novel_classes,
            latent_dim: s.latent_dim,
            feature_shape: s.feature_shape,
            shared_variation_scales: None,
            prototype_scale: None,
            fine_grained_ratio: s.fine_grained_ratio,
            base_per_class: 100,
            novel_per_class: 60,
            base_file: "base.txt".into(),
            novel_file: "novel.txt".into(),
            checkpoint: "checkpoint.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub way: usize,
    pub shot: usize,
    pub n_query: usize,
    pub n_episodes: usize,
    pub n_aug: usize,
    pub schemes: Vec<SchemeKind>,
    pub classifiers: Vec<ClassifierKind>,
    /// Blend weight toward the diagonal for the covariance-transfer scheme.
    pub shrinkage: f64,
    pub iterations: usize,
    pub iteration_unit: IterationUnit,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub knn_k: usize,
    pub svm_lambda: f64,
    pub ledger: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        let c = ClassifierConfig::default();
        Self {
            way: e.way,
            shot: e.shot,
            n_query: e.n_query,
            n_episodes: e.n_episodes,
            n_aug: e.n_aug,
            schemes: vec![SchemeKind::None, SchemeKind::Posterior],
            classifiers: vec![ClassifierKind::Linear],
            shrinkage: 0.1,
            iterations: c.iterations,
            iteration_unit: c.iteration_unit,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            knn_k: c.knn_k,
            svm_lambda: c.svm_lambda,
            ledger: "ledger.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Support items per novel class drawn by `augment`.
    pub support_per_class: usize,
    /// Scheme used by `augment`.
    pub scheme: SchemeKind,
    pub projection: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            support_per_class: 5,
            scheme: SchemeKind::Posterior,
            projection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub episodes: Option<usize>,
    pub way: Option<usize>,
    pub shot: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::path(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(e) = ov.epochs {
            // Keep the decay points at the same fractions of the run.
            let old = self.train.epochs;
            if e != old {
                self.train.decay_epochs = self
                    .train
                    .decay_epochs
                    .iter()
                    .map(|&d| d * e / old.max(1))
                    .filter(|&d| d > 0 && d < e)
                    .collect();
                self.train.decay_epochs.dedup();
            }
            self.train.epochs = e;
        }
        if let Some(n) = ov.episodes {
            self.eval.n_episodes = n;
        }
        if let Some(w) = ov.way {
            self.eval.way = w;
        }
        if let Some(s) = ov.shot {
            self.eval.shot = s;
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.schemes.is_empty() || self.eval.classifiers.is_empty() {
            return Err(CliError::config("eval.schemes and eval.classifiers must be non-empty"));
        }
        if !(0.0..=1.0).contains(&self.eval.shrinkage) {
            return Err(CliError::config("eval.shrinkage must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn synth_config(&self, spec_seed: u64) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            n_base_classes: d.n_base_classes,
            n_novel_classes: d.n_novel_classes,
            latent_dim: d.latent_dim,
            feature_shape: d.feature_shape,
            shared_variation_scales: d.shared_variation_scales.clone(),
            prototype_scale: d.prototype_scale,
            fine_grained_ratio: d.fine_grained_ratio,
            seed: spec_seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.eval;
        EvalConfig {
            way: e.way,
            shot: e.shot,
            n_query: e.n_query,
            n_episodes: e.n_episodes,
            n_aug: e.n_aug,
            classifier: ClassifierConfig {
                iterations: e.iterations,
                iteration_unit: e.iteration_unit,
                batch_size: e.batch_size,
                learning_rate: e.learning_rate,
                knn_k: e.knn_k,
                svm_lambda: e.svm_lambda,
            },
        }
    }

    /// Hex SHA-256 of the resolved configuration in canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&json);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
