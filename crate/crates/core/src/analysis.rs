//! Cluster-geometry and distribution-fidelity metrics over labeled features.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfdError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFeatures {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(VfdError::LengthMismatch {
                expected: features.len(),
                found: labels.len(),
            });
        }
        if let Some(first) = features.first() {
            let d = first.len();
            if let Some(bad) = features.iter().find(|f| f.len() != d) {
                return Err(VfdError::LengthMismatch {
                    expected: d,
                    found: bad.len(),
                });
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Concatenation of two sets with equal feature dimension.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if !self.is_empty() && !other.is_empty() && self.dim() != other.dim() {
            return Err(VfdError::LengthMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let mut features = self.features.clone();
        features.extend(other.features.iter().cloned());
        let mut labels = self.labels.clone();
        labels.extend(&other.labels);
        Ok(Self { features, labels })
    }

    /// Arithmetic class centers, in [`classes`](Self::classes) order.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        self.classes()
            .iter()
            .map(|&c| {
                let mut sum = vec![0.0; d];
                let mut n = 0usize;
                for (f, _) in self.features.iter().zip(&self.labels).filter(|(_, l)| **l == c) {
                    sum.iter_mut().zip(f).for_each(|(s, v)| *s += v);
                    n += 1;
                }
                sum.into_iter().map(|s| s / n as f64).collect()
            })
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-class mean squared deviation from the class center, and their mean.
pub fn intra_class_variance(data: &LabeledFeatures) -> Result<(Vec<f64>, f64)> {
    if data.is_empty() {
        return Err(VfdError::EmptyInput("labeled features".into()));
    }
    let classes = data.classes();
    let centers = data.centers();
    let per: Vec<f64> = classes
        .iter()
        .zip(&centers)
        .map(|(&c, center)| {
            let (s, n) = data
                .features
                .iter()
                .zip(&data.labels)
                .filter(|(_, l)| **l == c)
                .fold((0.0, 0usize), |(s, n), (f, _)| (s + sq_dist(f, center), n + 1));
            s / n as f64
        })
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Euclidean distances between class centers (row-major `C × C`) and their
/// mean over unordered pairs.
pub fn inter_class_distance(data: &LabeledFeatures) -> Result<(Vec<f64>, f64)> {
    let centers = data.centers();
    let c = centers.len();
    if c < 2 {
        return Err(VfdError::Degenerate(format!("need at least 2 classes, found {c}")));
    }
    let mut m = vec![0.0; c * c];
    let mut sum = 0.0;
    for i in 0..c {
        for j in i + 1..c {
            let d = sq_dist(&centers[i], &centers[j]).sqrt();
            m[i * c + j] = d;
            m[j * c + i] = d;
            sum += d;
        }
    }
    Ok((m, sum / (c * (c - 1) / 2) as f64))
}

/// Per-class `max_{j≠i} (Intra_i + Intra_j) / Inter_ij` and their mean.
pub fn dbi(data: &LabeledFeatures) -> Result<(f64, Vec<f64>)> {
    let (intra, _) = intra_class_variance(data)?;
    let (inter, _) = inter_class_distance(data)?;
    let c = intra.len();
    let mut per = vec![0.0; c];
    for i in 0..c {
        let mut best = f64::NEG_INFINITY;
        for j in 0..c {
            if i == j {
                continue;
            }
            let d = inter[i * c + j];
            if d == 0.0 {
                let cl = data.classes();
                return Err(VfdError::Degenerate(format!("classes {} and {} have coincident centers", cl[i], cl[j])));
            }
            best = best.max((intra[i] + intra[j]) / d);
        }
        per[i] = best;
    }
    Ok((per.iter().sum::<f64>() / c as f64, per))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub d_intra: f64,
    pub d_inter: f64,
    pub dbi: f64,
    pub per_class_intra: Vec<f64>,
    pub per_class_dbi: Vec<f64>,
    pub classes: Vec<usize>,
    /// How per-class indices are aggregated into `dbi`.
    pub dbi_aggregation: String,
}

pub fn geometry_report(data: &LabeledFeatures) -> Result<GeometryReport> {
    let (per_class_intra, d_intra) = intra_class_variance(data)?;
    let (_, d_inter) = inter_class_distance(data)?;
    let (dbi, per_class_dbi) = dbi(data)?;
    Ok(GeometryReport {
        d_intra,
        d_inter,
        dbi,
        per_class_intra,
        per_class_dbi,
        classes: data.classes(),
        dbi_aggregation: "mean of per-class maxima".into(),
    })
}

/// Fraction of `augmented` points whose Euclidean nearest neighbor in
/// `real_pool` has the same label; ties go to the lowest pool index.
pub fn nn_class_retention(augmented: &LabeledFeatures, real_pool: &LabeledFeatures) -> Result<f64> {
    if augmented.is_empty() || real_pool.is_empty() {
        return Err(VfdError::EmptyInput("retention pools".into()));
    }
    if augmented.dim() != real_pool.dim() {
        return Err(VfdError::LengthMismatch {
            expected: real_pool.dim(),
            found: augmented.dim(),
        });
    }
    let hits = augmented
        .features
        .iter()
        .zip(&augmented.labels)
        .filter(|(f, l)| {
            let mut best = (f64::INFINITY, 0);
            for (k, r) in real_pool.features.iter().enumerate() {
                let d = sq_dist(f, r);
                if d < best.0 {
                    best = (d, k);
                }
            }
            real_pool.labels[best.1] == **l
        })
        .count();
    Ok(hits as f64 / augmented.len() as f64)
}

/// Projection of centered features onto the top two principal directions.
///
/// Each direction's sign is fixed so its largest-magnitude component is
/// positive. With fewer than two non-degenerate directions the missing axis
/// is zero.
pub fn project_2d(features: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    if features.len() < 2 {
        return Err(VfdError::EmptyInput("projection needs at least 2 samples".into()));
    }
    let d = features[0].len();
    if d == 0 {
        return Err(VfdError::Degenerate("zero-dimensional features".into()));
    }
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(VfdError::LengthMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for f in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += f[i] * f[j] / (n - 1.0);
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Option<Vec<f64>> {
        let idx = *order.get(k)?;
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().cloned().collect();
        let lead = v.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Some(v)
    };
    let (a1, a2) = (axis(0).unwrap(), axis(1));
    Ok(centered
        .iter()
        .map(|f| {
            let x = f.iter().zip(&a1).map(|(p, q)| p * q).sum();
            let y = a2.as_ref().map_or(0.0, |a| f.iter().zip(a).map(|(p, q)| p * q).sum());
            (x, y)
        })
        .collect())
}

/// Writes `label,x,y` rows with a header line.
pub fn write_projection_csv(mut w: impl Write, labels: &[usize], coords: &[(f64, f64)]) -> Result<()> {
    writeln!(w, "label,x,y")?;
    for (l, (x, y)) in labels.iter().zip(coords) {
        writeln!(w, "{l},{x:?},{y:?}")?;
    }
    Ok(())
}
