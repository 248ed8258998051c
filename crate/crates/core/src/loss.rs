//! Loss terms of the disentanglement objective.
//!
//! The KL regularizer is split into index-code mutual information, total
//! correlation and dimension-wise KL. Aggregate-posterior densities are
//! estimated from the minibatch with stratified importance weights: the
//! sample's own posterior gets weight `1/N`, each of the other `M − 1`
//! batch posteriors `(N − 1)/(N(M − 1))`, where `N` is the dataset size.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VfdError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Posterior parameters of the intra-class-variance code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// `z_V = μ + exp(½·log_var) ⊙ eps`.
pub fn reparameterize(stats: &LatentStats, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != stats.dim() || stats.log_var.len() != stats.dim() {
        return Err(VfdError::LengthMismatch {
            expected: stats.dim(),
            found: eps.len(),
        });
    }
    Ok(stats
        .mu
        .iter()
        .zip(&stats.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(VfdError::LabelOutOfRange {
            label,
            n_classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

pub fn loss_cls(logits: &[f64], label: usize) -> Result<f64> {
    cross_entropy(logits, label).map(|(l, _)| l)
}

/// Closed-form `KL(N(μ, σ²) || N(0, 1))` for each dimension.
pub fn gaussian_kl_per_dim(stats: &LatentStats) -> Vec<f64> {
    stats
        .mu
        .iter()
        .zip(&stats.log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .collect()
}

/// Closed-form `KL(N(μ, diag σ²) || N(0, I))`.
pub fn gaussian_kl(stats: &LatentStats) -> f64 {
    gaussian_kl_per_dim(stats).iter().sum()
}

/// Single-sample estimate `log q(z|x) − log p(z)`.
pub fn kl_single_sample(stats: &LatentStats, z: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((m, lv), zk) in stats.mu.iter().zip(&stats.log_var).zip(z) {
        s += log_normal(*zk, *m, *lv) - log_normal(*zk, 0.0, 0.0);
    }
    s
}

#[inline]
pub fn log_normal(z: f64, mu: f64, log_var: f64) -> f64 {
    let d = z - mu;
    -0.5 * (LN_2PI + log_var + d * d * (-log_var).exp())
}

/// Minibatch estimates of the three KL components, with what is needed to
/// backpropagate a weighted sum of them.
#[derive(Debug, Clone)]
pub struct KlDecomposition {
    pub kl_mi: f64,
    pub kl_tc: f64,
    pub kl_dim: f64,
    m: usize,
    d: usize,
    /// `log w_ij` flattened `[i][j]`
    log_w: Vec<f64>,
    /// `log q(z_i | x_j)` per dimension, flattened `[i][j][k]`
    ell: Vec<f64>,
    /// `log q̂(z_i)`
    log_qz: Vec<f64>,
    /// `log q̂(z_ik)`, flattened `[i][k]`
    log_qzj: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Estimate `(kl_mi, kl_tc, kl_dim)` from posteriors and their samples.
///
/// `samples[i]` must be drawn from `stats[i]`.
pub fn kl_decomposed(stats: &[LatentStats], samples: &[Vec<f64>], dataset_size: usize) -> Result<KlDecomposition> {
    let m = stats.len();
    if m == 0 {
        return Err(VfdError::EmptyInput("KL batch".into()));
    }
    if samples.len() != m {
        return Err(VfdError::LengthMismatch {
            expected: m,
            found: samples.len(),
        });
    }
    if dataset_size < m {
        return Err(VfdError::InvalidConfig(format!(
            "dataset size {dataset_size} smaller than batch size {m}"
        )));
    }
    let d = stats[0].dim();
    for (s, z) in stats.iter().zip(samples) {
        if s.dim() != d || s.log_var.len() != d || z.len() != d {
            return Err(VfdError::LengthMismatch {
                expected: d,
                found: z.len(),
            });
        }
    }
    let n = dataset_size as f64;
    let mut log_w = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            log_w[i * m + j] = if i == j {
                -n.ln()
            } else {
                ((n - 1.0) / (n * (m as f64 - 1.0))).ln()
            };
        }
    }
    if m == 1 {
        // a lone sample stands in for the whole aggregate
        log_w[0] = 0.0;
    }

    let mut ell = vec![0.0; m * m * d];
    for i in 0..m {
        for j in 0..m {
            for k in 0..d {
                ell[(i * m + j) * d + k] = log_normal(samples[i][k], stats[j].mu[k], stats[j].log_var[k]);
            }
        }
    }

    let mut log_qz = vec![0.0; m];
    let mut log_qzj = vec![0.0; m * d];
    let (mut mi, mut tc, mut dw) = (0.0, 0.0, 0.0);
    for i in 0..m {
        let joint = (0..m).map(|j| ell[(i * m + j) * d..(i * m + j + 1) * d].iter().sum::<f64>() + log_w[i * m + j]);
        log_qz[i] = log_sum_exp(joint);
        for k in 0..d {
            log_qzj[i * d + k] = log_sum_exp((0..m).map(|j| ell[(i * m + j) * d + k] + log_w[i * m + j]));
        }
        let log_qzx: f64 = ell[(i * m + i) * d..(i * m + i + 1) * d].iter().sum();
        let sum_marg: f64 = log_qzj[i * d..(i + 1) * d].iter().sum();
        let log_pz: f64 = samples[i].iter().map(|z| log_normal(*z, 0.0, 0.0)).sum();
        mi += log_qzx - log_qz[i];
        tc += log_qz[i] - sum_marg;
        dw += sum_marg - log_pz;
    }
    let mf = m as f64;
    Ok(KlDecomposition {
        kl_mi: mi / mf,
        kl_tc: tc / mf,
        kl_dim: dw / mf,
        m,
        d,
        log_w,
        ell,
        log_qz,
        log_qzj,
    })
}

/// Gradients of a weighted KL combination w.r.t. samples and posterior
/// parameters (samples treated as free variables).
#[derive(Debug, Clone)]
pub struct KlGrads {
    pub samples: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub log_var: Vec<Vec<f64>>,
}

impl KlDecomposition {
    pub fn total(&self) -> f64 {
        self.kl_mi + self.kl_tc + self.kl_dim
    }

    /// Gradient of `w_mi·kl_mi + w_tc·kl_tc + w_dim·kl_dim`.
    pub fn backward(
        &self,
        stats: &[LatentStats],
        samples: &[Vec<f64>],
        weights: (f64, f64, f64),
    ) -> KlGrads {
        let (m, d) = (self.m, self.d);
        let (w_mi, w_tc, w_dim) = weights;
        let mf = m as f64;
        // per-sample objective: w_mi·log q(z|x) + (w_tc − w_mi)·log q̂(z)
        //   + (w_dim − w_tc)·Σ_k log q̂(z_k) − w_dim·log p(z)
        let c_qzx = w_mi / mf;
        let c_qz = (w_tc - w_mi) / mf;
        let c_marg = (w_dim - w_tc) / mf;
        let c_pz = -w_dim / mf;

        let mut g_ell = vec![0.0; m * m * d];
        for i in 0..m {
            for k in 0..d {
                g_ell[(i * m + i) * d + k] += c_qzx;
            }
            for j in 0..m {
                let a: f64 = self.ell[(i * m + j) * d..(i * m + j + 1) * d].iter().sum::<f64>() + self.log_w[i * m + j];
                let p = (a - self.log_qz[i]).exp();
                for k in 0..d {
                    let b = self.ell[(i * m + j) * d + k] + self.log_w[i * m + j];
                    let q = (b - self.log_qzj[i * d + k]).exp();
                    g_ell[(i * m + j) * d + k] += c_qz * p + c_marg * q;
                }
            }
        }

        let mut gs = vec![vec![0.0; d]; m];
        let mut gmu = vec![vec![0.0; d]; m];
        let mut glv = vec![vec![0.0; d]; m];
        for i in 0..m {
            for k in 0..d {
                // −log p(z) = ½ z² + const
                gs[i][k] += c_pz * -samples[i][k];
            }
            for j in 0..m {
                for k in 0..d {
                    let g = g_ell[(i * m + j) * d + k];
                    if g == 0.0 {
                        continue;
                    }
                    let inv = (-stats[j].log_var[k]).exp();
                    let diff = samples[i][k] - stats[j].mu[k];
                    gs[i][k] += g * (-diff * inv);
                    gmu[j][k] += g * (diff * inv);
                    glv[j][k] += g * (-0.5 + 0.5 * diff * diff * inv);
                }
            }
        }
        KlGrads {
            samples: gs,
            mu: gmu,
            log_var: glv,
        }
    }
}

/// Unweighted sum of squared errors over all map entries.
pub fn reconstruction(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(VfdError::LengthMismatch {
            expected: x.len(),
            found: x_hat.len(),
        });
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `‖X − X̂‖² + kl_mi + α·kl_tc + kl_dim`
pub fn loss_intra(x: &[f64], x_hat: &[f64], kl: (f64, f64, f64), alpha: f64) -> Result<f64> {
    Ok(reconstruction(x, x_hat)? + kl.0 + alpha * kl.1 + kl.2)
}

/// Cross-entropy of the classifier on an augmented feature.
pub fn loss_aug(logits_of_augmented: &[f64], label: usize) -> Result<f64> {
    loss_cls(logits_of_augmented, label)
}

pub fn total_loss(l_cls: f64, l_intra: f64, l_aug: f64, beta: f64) -> f64 {
    l_cls + l_intra + beta * l_aug
}

/// Per-step loss record; the JSON field names are part of the log format.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub recon: f64,
    pub kl_mi: f64,
    pub kl_tc: f64,
    pub kl_dim: f64,
    pub l_intra: f64,
    pub l_aug: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(l_cls: f64, recon: f64, kl: (f64, f64, f64), l_aug: f64, alpha: f64, beta: f64) -> Self {
        let l_intra = recon + kl.0 + alpha * kl.1 + kl.2;
        Self {
            l_cls,
            recon,
            kl_mi: kl.0,
            kl_tc: kl.1,
            kl_dim: kl.2,
            l_intra,
            l_aug,
            total: total_loss(l_cls, l_intra, l_aug, beta),
            alpha,
            beta,
        }
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("l_cls", self.l_cls),
            ("recon", self.recon),
            ("kl_mi", self.kl_mi),
            ("kl_tc", self.kl_tc),
            ("kl_dim", self.kl_dim),
            ("l_aug", self.l_aug),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }

    /// Weighted running sum helper for epoch averages.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.l_cls += weight * other.l_cls;
        self.recon += weight * other.recon;
        self.kl_mi += weight * other.kl_mi;
        self.kl_tc += weight * other.kl_tc;
        self.kl_dim += weight * other.kl_dim;
        self.l_intra += weight * other.l_intra;
        self.l_aug += weight * other.l_aug;
        self.total += weight * other.total;
        self.alpha = other.alpha;
        self.beta = other.beta;
    }
}
