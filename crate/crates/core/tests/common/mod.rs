//! Independent reference computations shared by integration tests. Written
//! as plain loops directly from the definitions; nothing here calls into
//! the library's numeric code.
#![allow(dead_code)]

use std::f64::consts::PI;

/// `½ Σ (μ² + σ² − 1 − ln σ²)` with `σ² = exp(log_var)`.
pub fn closed_form_kl(mu: &[f64], log_var: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..mu.len() {
        let var = log_var[j].exp();
        s += mu[j] * mu[j] + var - 1.0 - var.ln();
    }
    0.5 * s
}

fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

/// Exact terms of the decomposed KL for a two-dimensional factorized
/// Gaussian posterior family, by numerical integration on a square grid.
///
/// The aggregate posterior is the uniform mixture of `N(mu[n], diag(sd[n]²))`.
/// Returns `(index-code MI, total correlation, dimension-wise KL)`.
pub fn decomposition_by_integration(mu: &[[f64; 2]], sd: &[[f64; 2]], half_width: f64, grid: usize) -> (f64, f64, f64) {
    let n = mu.len();
    let h = 2.0 * half_width / grid as f64;
    let xs: Vec<f64> = (0..grid).map(|g| -half_width + (g as f64 + 0.5) * h).collect();
    let mut comp = [vec![vec![0.0; grid]; n], vec![vec![0.0; grid]; n]];
    for (j, table) in comp.iter_mut().enumerate() {
        for (i, row) in table.iter_mut().enumerate() {
            for (g, v) in row.iter_mut().enumerate() {
                *v = normal_pdf(xs[g], mu[i][j], sd[i][j]);
            }
        }
    }
    let marginal = |j: usize| -> Vec<f64> {
        (0..grid)
            .map(|g| comp[j].iter().map(|row| row[g]).sum::<f64>() / n as f64)
            .collect()
    };
    let q0 = marginal(0);
    let q1 = marginal(1);

    let mut joint_entropy = 0.0;
    for a in 0..grid {
        let mut row = vec![0.0; grid];
        for i in 0..n {
            let w = comp[0][i][a];
            if w == 0.0 {
                continue;
            }
            for (b, r) in row.iter_mut().enumerate() {
                *r += w * comp[1][i][b];
            }
        }
        for r in row {
            let q = r / n as f64;
            if q > 0.0 {
                joint_entropy -= q * q.ln() * h * h;
            }
        }
    }
    let entropy = |q: &[f64]| -> f64 { q.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln() * h).sum() };
    let cross_prior = |q: &[f64]| -> f64 {
        q.iter()
            .zip(&xs)
            .map(|(v, x)| -v * (-0.5 * (2.0 * PI).ln() - 0.5 * x * x) * h)
            .sum()
    };
    let cond_entropy: f64 = sd
        .iter()
        .map(|s| s.iter().map(|v| 0.5 * (2.0 * PI * std::f64::consts::E * v * v).ln()).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let mi = joint_entropy - cond_entropy;
    let tc = entropy(&q0) + entropy(&q1) - joint_entropy;
    let dw = (cross_prior(&q0) - entropy(&q0)) + (cross_prior(&q1) - entropy(&q1));
    (mi, tc, dw)
}

fn class_members(features: &[Vec<f64>], labels: &[usize]) -> Vec<(usize, Vec<Vec<f64>>)> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let rows = features
                .iter()
                .zip(labels)
                .filter(|(_, l)| **l == c)
                .map(|(f, _)| f.clone())
                .collect();
            (c, rows)
        })
        .collect()
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            m[j] += r[j];
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-class average squared deviation from the class center, and their mean.
pub fn intra_oracle(features: &[Vec<f64>], labels: &[usize]) -> (Vec<f64>, f64) {
    let per: Vec<f64> = class_members(features, labels)
        .iter()
        .map(|(_, rows)| {
            let m = mean_of(rows);
            rows.iter().map(|r| dist(r, &m).powi(2)).sum::<f64>() / rows.len() as f64
        })
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    (per, mean)
}

/// Mean center distance over unordered class pairs.
pub fn inter_oracle(features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let centers: Vec<Vec<f64>> = class_members(features, labels).iter().map(|(_, r)| mean_of(r)).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            total += dist(&centers[i], &centers[j]);
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Mean over classes of `max_j (intra_i + intra_j) / ‖c_i − c_j‖`.
pub fn dbi_oracle(features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let groups = class_members(features, labels);
    let centers: Vec<Vec<f64>> = groups.iter().map(|(_, r)| mean_of(r)).collect();
    let (intra, _) = intra_oracle(features, labels);
    let k = centers.len();
    let mut sum = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i != j {
                worst = worst.max((intra[i] + intra[j]) / dist(&centers[i], &centers[j]));
            }
        }
        sum += worst;
    }
    sum / k as f64
}

/// Nearest-neighbor label agreement; first minimum wins ties.
pub fn retention_oracle(aug: &[Vec<f64>], aug_labels: &[usize], real: &[Vec<f64>], real_labels: &[usize]) -> f64 {
    let mut hits = 0;
    for (a, la) in aug.iter().zip(aug_labels) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, r) in real.iter().enumerate() {
            let d = dist(a, r);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        if real_labels[best] == *la {
            hits += 1;
        }
    }
    hits as f64 / aug.len() as f64
}

/// Pooled within-class covariance with denominator `N − C`, blended toward
/// its diagonal.
pub fn pooled_covariance_oracle(features: &[Vec<f64>], labels: &[usize], shrinkage: f64) -> Vec<Vec<f64>> {
    let d = features[0].len();
    let groups = class_members(features, labels);
    let mut s = vec![vec![0.0; d]; d];
    for (_, rows) in &groups {
        let m = mean_of(rows);
        for r in rows {
            for a in 0..d {
                for b in 0..d {
                    s[a][b] += (r[a] - m[a]) * (r[b] - m[b]);
                }
            }
        }
    }
    let denom = (features.len() - groups.len()) as f64;
    for a in 0..d {
        for b in 0..d {
            let v = s[a][b] / denom;
            s[a][b] = if a == b { v } else { (1.0 - shrinkage) * v };
        }
    }
    s
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
