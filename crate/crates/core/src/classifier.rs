//! Lightweight heads fitted on (augmented) support features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfdError};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// Multinomial softmax regression.
    Linear,
    /// One-vs-rest logistic regression.
    Logistic,
    Knn,
    /// One-vs-rest hinge loss.
    LinearSvm,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Logistic => "logistic",
            Self::Knn => "knn",
            Self::LinearSvm => "linear-svm",
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = VfdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "softmax" => Ok(Self::Linear),
            "logistic" => Ok(Self::Logistic),
            "knn" => Ok(Self::Knn),
            "linear-svm" | "svm" => Ok(Self::LinearSvm),
            _ => Err(VfdError::Unknown {
                kind: "classifier",
                value: s.to_string(),
            }),
        }
    }
}

/// What one of the `iterations` means for the gradient-trained heads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterationUnit {
    /// A pass over the shuffled training set in minibatches.
    #[default]
    Epoch,
    /// A single minibatch update.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub iterations: usize,
    pub iteration_unit: IterationUnit,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub knn_k: usize,
    /// L2 weight on the hinge-loss objective.
    pub svm_lambda: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            iteration_unit: IterationUnit::Epoch,
            batch_size: 4,
            learning_rate: 0.01,
            knn_k: 1,
            svm_lambda: 0.0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.knn_k == 0 {
            return Err(VfdError::InvalidConfig("batch_size and knn_k must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.svm_lambda < 0.0 {
            return Err(VfdError::InvalidConfig("learning_rate must be positive, svm_lambda non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Classifier {
    /// `scores = W x + b` with `W` row-major `(classes, dim)`.
    Affine {
        kind: ClassifierKind,
        n_classes: usize,
        dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Knn {
        k: usize,
        n_classes: usize,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
    },
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Classifier {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Self::Affine { kind, .. } => *kind,
            Self::Knn { .. } => ClassifierKind::Knn,
        }
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Affine {
                n_classes,
                dim,
                weight,
                bias,
                ..
            } => (0..*n_classes)
                .map(|c| weight[c * dim..(c + 1) * dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias[c])
                .collect(),
            Self::Knn {
                k,
                n_classes,
                features,
                labels,
            } => {
                // votes, with the nearest member's distance as tie-breaker
                let mut d: Vec<(f64, usize)> = features
                    .iter()
                    .enumerate()
                    .map(|(i, f)| (f.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(), i))
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut votes = vec![0.0; *n_classes];
                for (rank, &(_, i)) in d.iter().take(*k).enumerate() {
                    votes[labels[i]] += 1.0 + 1e-9 * (k - rank) as f64 / *k as f64;
                }
                votes
            }
        }
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.scores(x))
    }
}

/// Fits a head of the given kind; labels must cover `0..n_classes`.
pub fn fit_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    kind: ClassifierKind,
    config: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<Classifier> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(VfdError::LengthMismatch {
            expected: features.len(),
            found: labels.len(),
        });
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(VfdError::LabelOutOfRange { label: l, n_classes });
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(VfdError::InsufficientItems {
            class: c,
            available: 0,
            required: 1,
        });
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(VfdError::LengthMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    if kind == ClassifierKind::Knn {
        return Ok(Classifier::Knn {
            k: config.knn_k.min(features.len()),
            n_classes,
            features: features.to_vec(),
            labels: labels.to_vec(),
        });
    }

    let mut weight = vec![0.0; n_classes * dim];
    let mut bias = vec![0.0; n_classes];
    let n = features.len();
    let step = |batch: &[usize], weight: &mut Vec<f64>, bias: &mut Vec<f64>| {
        let mut gw = vec![0.0; n_classes * dim];
        let mut gb = vec![0.0; n_classes];
        for &i in batch {
            let x = &features[i];
            let s: Vec<f64> = (0..n_classes)
                .map(|c| weight[c * dim..(c + 1) * dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias[c])
                .collect();
            let g: Vec<f64> = match kind {
                ClassifierKind::Linear => {
                    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
                    (0..n_classes)
                        .map(|c| (s[c] - max).exp() / z - if c == labels[i] { 1.0 } else { 0.0 })
                        .collect()
                }
                ClassifierKind::Logistic => (0..n_classes)
                    .map(|c| sigmoid(s[c]) - if c == labels[i] { 1.0 } else { 0.0 })
                    .collect(),
                ClassifierKind::LinearSvm => (0..n_classes)
                    .map(|c| {
                        let t = if c == labels[i] { 1.0 } else { -1.0 };
                        if t * s[c] < 1.0 {
                            -t
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                ClassifierKind::Knn => unreachable!(),
            };
            for c in 0..n_classes {
                gb[c] += g[c];
                for (gwk, xk) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *gwk += g[c] * xk;
                }
            }
        }
        let m = batch.len() as f64;
        let lam = if kind == ClassifierKind::LinearSvm { config.svm_lambda } else { 0.0 };
        for (w, g) in weight.iter_mut().zip(&gw) {
            *w -= config.learning_rate * (g / m + lam * *w);
        }
        for (b, g) in bias.iter_mut().zip(&gb) {
            *b -= config.learning_rate * g / m;
        }
    };

    let mut order: Vec<usize> = (0..n).collect();
    match config.iteration_unit {
        IterationUnit::Epoch => {
            for _ in 0..config.iterations {
                order.shuffle(rng);
                for batch in order.chunks(config.batch_size) {
                    step(batch, &mut weight, &mut bias);
                }
            }
        }
        IterationUnit::Step => {
            let mut pos = n;
            let mut batch = Vec::with_capacity(config.batch_size);
            for _ in 0..config.iterations {
                batch.clear();
                while batch.len() < config.batch_size.min(n) {
                    if pos == n {
                        order.shuffle(rng);
                        pos = 0;
                    }
                    batch.push(order[pos]);
                    pos += 1;
                }
                step(&batch, &mut weight, &mut bias);
            }
        }
    }
    Ok(Classifier::Affine {
        kind,
        n_classes,
        dim,
        weight,
        bias,
    })
}

/// Percentage of correctly labeled items.
pub fn evaluate(classifier: &Classifier, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.is_empty() {
        return Err(VfdError::EmptyInput("query set".into()));
    }
    if features.len() != labels.len() {
        return Err(VfdError::LengthMismatch {
            expected: features.len(),
            found: labels.len(),
        });
    }
    let correct = features.iter().zip(labels).filter(|(f, l)| classifier.predict(f) == **l).count();
    Ok(100.0 * correct as f64 / features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal};

    fn clusters(rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut f = Vec::new();
        let mut l = Vec::new();
        for c in 0..3 {
            for _ in 0..6 {
                let mut x = standard_normal(rng, 2).iter().map(|v| 0.1 * v).collect::<Vec<_>>();
                x[c % 2] += if c == 2 { -5.0 } else { 5.0 };
                f.push(x);
                l.push(c);
            }
        }
        (f, l)
    }

    #[test]
    fn separable_clusters_fit_perfectly() {
        let mut rng = seeded(1);
        let (f, l) = clusters(&mut rng);
        for kind in [
            ClassifierKind::Linear,
            ClassifierKind::Logistic,
            ClassifierKind::Knn,
            ClassifierKind::LinearSvm,
        ] {
            let c = fit_classifier(&f, &l, 3, kind, &ClassifierConfig::default(), &mut rng).unwrap();
            assert_eq!(evaluate(&c, &f, &l).unwrap(), 100.0, "{kind:?}");
        }
    }

    #[test]
    fn knn_returns_identical_point_label() {
        let f = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![5.0, 5.0]];
        let c = fit_classifier(&f, &[2, 0, 1], 3, ClassifierKind::Knn, &ClassifierConfig::default(), &mut seeded(0))
            .unwrap();
        assert_eq!(c.predict(&[1.0, 1.0]), 0);
        assert_eq!(c.predict(&[5.0, 5.0]), 1);
    }

    #[test]
    fn empty_class_is_an_error() {
        let f = vec![vec![0.0], vec![1.0]];
        let r = fit_classifier(&f, &[0, 0], 2, ClassifierKind::Linear, &ClassifierConfig::default(), &mut seeded(0));
        assert!(matches!(r, Err(VfdError::InsufficientItems { class: 1, .. })));
    }

    #[test]
    fn accuracy_edge_cases() {
        let f = vec![vec![0.0], vec![10.0]];
        let c = fit_classifier(&f, &[0, 1], 2, ClassifierKind::Knn, &ClassifierConfig::default(), &mut seeded(0)).unwrap();
        assert_eq!(evaluate(&c, &f, &[0, 1]).unwrap(), 100.0);
        assert_eq!(evaluate(&c, &[vec![0.0]], &[1]).unwrap(), 0.0);
        assert!(evaluate(&c, &[], &[]).is_err());
    }

    #[test]
    fn step_mode_runs_fixed_updates() {
        let mut rng = seeded(3);
        let (f, l) = clusters(&mut rng);
        let cfg = ClassifierConfig {
            iteration_unit: IterationUnit::Step,
            iterations: 200,
            ..Default::default()
        };
        let c = fit_classifier(&f, &l, 3, ClassifierKind::Linear, &cfg, &mut rng).unwrap();
        assert_eq!(evaluate(&c, &f, &l).unwrap(), 100.0);
    }
}
