//! Pooled within-class covariance: the covariance-matrix baseline for the
//! shared intra-class variation.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfdError};
use crate::rng::{standard_normal, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledCovariance {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub sigma_hat: Vec<f64>,
    pub shrinkage: f64,
    pub n_samples: usize,
    pub n_classes: usize,
    /// Row-major `F` with `F Fᵀ = Σ̂`, from the symmetric eigendecomposition.
    factor: Vec<f64>,
}

/// Pools per-class centered outer products with denominator `N − C`, then
/// blends `(1 − shrinkage)·Σ + shrinkage·diag(Σ)`.
pub fn estimate_pooled_covariance(features: &[Vec<f64>], labels: &[usize], shrinkage: f64) -> Result<PooledCovariance> {
    if features.is_empty() {
        return Err(VfdError::EmptyInput("covariance features".into()));
    }
    if features.len() != labels.len() {
        return Err(VfdError::LengthMismatch {
            expected: features.len(),
            found: labels.len(),
        });
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(VfdError::InvalidConfig(format!("shrinkage {shrinkage} not in [0, 1]")));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(VfdError::LengthMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut sigma = vec![0.0; d * d];
    for &c in &classes {
        let members: Vec<&Vec<f64>> = features.iter().zip(labels).filter(|(_, l)| **l == c).map(|(f, _)| f).collect();
        if members.len() < 2 {
            return Err(VfdError::InsufficientItems {
                class: c,
                available: members.len(),
                required: 2,
            });
        }
        let mut mean = vec![0.0; d];
        for f in &members {
            mean.iter_mut().zip(f.iter()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        for f in &members {
            let dev: Vec<f64> = f.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in 0..d {
                    sigma[i * d + j] += dev[i] * dev[j];
                }
            }
        }
    }
    let denom = (features.len() - classes.len()) as f64;
    for i in 0..d {
        for j in 0..d {
            let v = sigma[i * d + j] / denom;
            sigma[i * d + j] = if i == j { v } else { (1.0 - shrinkage) * v };
        }
    }
    // exact symmetry regardless of accumulation order
    for i in 0..d {
        for j in 0..i {
            sigma[j * d + i] = sigma[i * d + j];
        }
    }
    PooledCovariance::new(d, sigma, shrinkage, features.len(), classes.len())
}

impl PooledCovariance {
    pub fn new(dim: usize, sigma_hat: Vec<f64>, shrinkage: f64, n_samples: usize, n_classes: usize) -> Result<Self> {
        if sigma_hat.len() != dim * dim {
            return Err(VfdError::LengthMismatch {
                expected: dim * dim,
                found: sigma_hat.len(),
            });
        }
        let factor = symmetric_factor(dim, &sigma_hat)?;
        Ok(Self {
            dim,
            sigma_hat,
            shrinkage,
            n_samples,
            n_classes,
            factor,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sigma_hat[i * self.dim + j]
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.sigma_hat);
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    /// Re-derives the sampling factor, e.g. after deserialization of an
    /// edited matrix.
    pub fn refactor(&mut self) -> Result<()> {
        self.factor = symmetric_factor(self.dim, &self.sigma_hat)?;
        Ok(())
    }
}

/// `F = V·diag(√λ)` from `Σ = V diag(λ) Vᵀ`; tiny negative eigenvalues from
/// rounding are clipped to zero.
fn symmetric_factor(d: usize, sigma: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = sigma.iter().find(|v| !v.is_finite()) {
        return Err(VfdError::Factorization(format!("matrix has non-finite entry {v}")));
    }
    if d == 0 {
        return Ok(Vec::new());
    }
    let m = DMatrix::from_row_slice(d, d, sigma);
    let scale = sigma.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-9 * scale {
        let trace: f64 = (0..d).map(|i| sigma[i * d + i]).sum();
        return Err(VfdError::Factorization(format!(
            "matrix not positive semi-definite: min eigenvalue {min:.3e}, trace {trace:.3e}, dim {d}"
        )));
    }
    let mut f = vec![0.0; d * d];
    for k in 0..d {
        let s = eig.eigenvalues[k].max(0.0).sqrt();
        for i in 0..d {
            f[i * d + k] = eig.eigenvectors[(i, k)] * s;
        }
    }
    Ok(f)
}

/// One draw `δ ~ N(0, Σ̂)`.
pub fn sample_perturbation(cov: &PooledCovariance, rng: &mut Rng) -> Vec<f64> {
    let d = cov.dim;
    let e = standard_normal(rng, d);
    (0..d)
        .map(|i| cov.factor[i * d..(i + 1) * d].iter().zip(&e).map(|(f, x)| f * x).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identical_points_give_zero_matrix() {
        let f = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![5.0, -1.0], vec![5.0, -1.0]];
        let c = estimate_pooled_covariance(&f, &[0, 0, 1, 1], 0.1).unwrap();
        assert!(c.sigma_hat.iter().all(|v| *v == 0.0));
        let mut rng = seeded(1);
        for _ in 0..10 {
            assert_eq!(sample_perturbation(&c, &mut rng), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn single_class_hand_value() {
        let f = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let c = estimate_pooled_covariance(&f, &[3, 3], 0.0).unwrap();
        assert_eq!(c.sigma_hat, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        assert!(estimate_pooled_covariance(&[vec![1.0], vec![2.0], vec![3.0]], &[0, 0, 1], 0.1).is_err());
        assert!(estimate_pooled_covariance(&[vec![1.0], vec![2.0]], &[0, 0], 1.5).is_err());
        assert!(estimate_pooled_covariance(&[], &[], 0.1).is_err());
        assert!(PooledCovariance::new(2, vec![1.0, 0.0, 0.0, -1.0], 0.0, 2, 1).is_err());
    }

    #[test]
    fn full_shrinkage_is_diagonal() {
        let mut rng = seeded(2);
        let f: Vec<Vec<f64>> = (0..30).map(|_| standard_normal(&mut rng, 4)).collect();
        let l: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let c = estimate_pooled_covariance(&f, &l, 1.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(c.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let c = PooledCovariance::new(2, vec![2.0, 0.5, 0.5, 1.0], 0.0, 10, 2).unwrap();
        let a = sample_perturbation(&c, &mut seeded(5));
        let b = sample_perturbation(&c, &mut seeded(5));
        assert_eq!(a, b);
    }
}
