//! Synthetic fine-grained tasks with a known shared intra-class variation,
//! plus the plain-text feature file format.
//!
//! Every item is generated as `factor = prototype(class) + v` with
//! `v ~ N(0, diag(shared_variation_scales²))`, the same scales for every
//! class, and rendered to a feature map by a frozen random affine map
//! followed by `tanh`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfdError};
use crate::feature::{FeatureMap, Item, LabeledDataset, Provenance, Shape3, Split};
use crate::rng::{self, Rng};

/// Generator parameters for [`make_task_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_base_classes: usize,
    pub n_novel_classes: usize,
    pub latent_dim: usize,
    pub feature_shape: Shape3,
    /// Per-dimension standard deviations of the shared variation. When
    /// absent, [`default_variation_scales`] is used.
    pub shared_variation_scales: Option<Vec<f64>>,
    /// Standard deviation of the prototype distribution. When absent it is
    /// `fine_grained_ratio` times the RMS of the variation scales.
    pub prototype_scale: Option<f64>,
    pub fine_grained_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_base_classes: 20,
            n_novel_classes: 10,
            latent_dim: 8,
            feature_shape: (16, 4, 4),
            shared_variation_scales: None,
            prototype_scale: None,
            fine_grained_ratio: 2.0,
            seed: 7,
        }
    }
}

/// Default anisotropic profile: half of the factor dimensions carry large
/// shared variation, the other half small, normalized to unit RMS.
pub fn default_variation_scales(latent_dim: usize) -> Vec<f64> {
    let hi = latent_dim.div_ceil(2);
    let raw: Vec<f64> = (0..latent_dim)
        .map(|j| if j < hi { 1.0 } else { 0.15 })
        .collect();
    let rms = (raw.iter().map(|s| s * s).sum::<f64>() / latent_dim as f64).sqrt();
    raw.into_iter().map(|s| s / rms).collect()
}

/// Frozen `x = tanh(W·factor + b)` map from factor space to a feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderMap {
    pub latent_dim: usize,
    pub output_shape: Shape3,
    /// Row-major `(C·H·W) × latent_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl RenderMap {
    pub fn render(&self, factor: &[f64]) -> FeatureMap {
        let l = self.latent_dim;
        let values = self
            .bias
            .iter()
            .enumerate()
            .map(|(r, b)| {
                let row = &self.weight[r * l..(r + 1) * l];
                let pre: f64 = row.iter().zip(factor).map(|(w, f)| w * f).sum::<f64>() + b;
                pre.tanh()
            })
            .collect();
        FeatureMap {
            shape: self.output_shape,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_base_classes: usize,
    pub n_novel_classes: usize,
    pub latent_dim: usize,
    pub feature_shape: Shape3,
    /// Base classes first (`0..n_base`), then novel classes.
    pub class_prototypes: Vec<Vec<f64>>,
    pub shared_variation_scales: Vec<f64>,
    pub prototype_scale: f64,
    pub render_map: RenderMap,
    pub seed: u64,
}

impl TaskSpec {
    pub fn n_classes(&self) -> usize {
        self.n_base_classes + self.n_novel_classes
    }

    /// Global class indices belonging to `split`.
    pub fn classes(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::BaseTrain => 0..self.n_base_classes,
            Split::Novel => self.n_base_classes..self.n_classes(),
        }
    }

    /// Draw one factor vector of `class`.
    pub fn sample_factor(&self, class: usize, rng: &mut Rng) -> Vec<f64> {
        let noise = rng::standard_normal(rng, self.latent_dim);
        self.class_prototypes[class]
            .iter()
            .zip(&self.shared_variation_scales)
            .zip(noise)
            .map(|((p, s), e)| p + s * e)
            .collect()
    }
}

pub fn make_task_spec(config: &SynthConfig) -> Result<TaskSpec> {
    let (c, h, w) = config.feature_shape;
    if config.n_base_classes == 0 || config.n_novel_classes == 0 {
        return Err(VfdError::InvalidConfig("class counts must be positive".into()));
    }
    if config.latent_dim == 0 || c == 0 || h == 0 || w == 0 {
        return Err(VfdError::InvalidConfig("dimensions must be positive".into()));
    }
    let flat = c * h * w;
    if config.latent_dim > flat {
        return Err(VfdError::InvalidConfig(format!(
            "latent_dim {} exceeds flattened feature size {flat}",
            config.latent_dim
        )));
    }
    let scales = match &config.shared_variation_scales {
        Some(s) => s.clone(),
        None => default_variation_scales(config.latent_dim),
    };
    if scales.len() != config.latent_dim {
        return Err(VfdError::LengthMismatch {
            expected: config.latent_dim,
            found: scales.len(),
        });
    }
    if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(VfdError::InvalidConfig("variation scales must be non-negative".into()));
    }
    let rms = (scales.iter().map(|s| s * s).sum::<f64>() / scales.len() as f64).sqrt();
    let prototype_scale = match config.prototype_scale {
        Some(p) => p,
        // all-zero variation keeps unit-scale prototypes so classes stay distinct
        None if rms == 0.0 => config.fine_grained_ratio,
        None => config.fine_grained_ratio * rms,
    };
    if !prototype_scale.is_finite() || prototype_scale <= 0.0 {
        return Err(VfdError::InvalidConfig("prototype scale must be positive".into()));
    }

    let mut rng = rng::stream(config.seed, "task-spec", 0);
    let n_classes = config.n_base_classes + config.n_novel_classes;
    let class_prototypes = (0..n_classes)
        .map(|_| {
            rng::standard_normal(&mut rng, config.latent_dim)
                .into_iter()
                .map(|e| prototype_scale * e)
                .collect()
        })
        .collect();

    // keep pre-activations near unit variance so tanh stays in its smooth range
    let factor_rms = (prototype_scale * prototype_scale + rms * rms).sqrt();
    let w_scale = 1.0 / ((config.latent_dim as f64).sqrt() * factor_rms);
    let weight = rng::standard_normal(&mut rng, flat * config.latent_dim)
        .into_iter()
        .map(|e| e * w_scale)
        .collect();
    let bias = rng::standard_normal(&mut rng, flat)
        .into_iter()
        .map(|e| 0.1 * e)
        .collect();

    Ok(TaskSpec {
        n_base_classes: config.n_base_classes,
        n_novel_classes: config.n_novel_classes,
        latent_dim: config.latent_dim,
        feature_shape: config.feature_shape,
        class_prototypes,
        shared_variation_scales: scales,
        prototype_scale,
        render_map: RenderMap {
            latent_dim: config.latent_dim,
            output_shape: config.feature_shape,
            weight,
            bias,
        },
        seed: config.seed,
    })
}

/// Factor vectors of `n` items of `class`, in generation order.
pub fn sample_factors(spec: &TaskSpec, class: usize, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| spec.sample_factor(class, rng)).collect()
}

/// `n_per_class` rendered items for every class of `split`.
///
/// Class-major order; dense labels index `spec.classes(split)`.
pub fn sample_dataset(
    spec: &TaskSpec,
    n_per_class: usize,
    split: Split,
    seed: u64,
) -> Result<LabeledDataset> {
    let classes = spec.classes(split);
    let split_tag = match split {
        Split::BaseTrain => "base-train",
        Split::Novel => "novel",
    };
    let mut items = Vec::with_capacity(classes.len() * n_per_class);
    for (dense, class) in classes.clone().enumerate() {
        let mut rng = rng::stream(seed, split_tag, class as u64);
        for factor in sample_factors(spec, class, n_per_class, &mut rng) {
            items.push(Item {
                input: spec.render_map.render(&factor),
                label: dense,
            });
        }
    }
    Ok(LabeledDataset {
        items,
        class_ids: classes.map(|c| c as u64).collect(),
        split: Some(split),
        provenance: Provenance::Synthetic,
    })
}

/// Shuffle helper shared by samplers: uniform choice of `k` of `0..n`
/// without replacement, in draw order.
pub fn choose_without_replacement(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Write a dataset as `dim=<D> count=<N>` followed by `label,v0,...` rows.
///
/// Labels written are the original class ids. Values use the shortest
/// representation that parses back to the identical `f64`.
pub fn save_feature_file(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    let dim = data.items.first().map_or(0, |i| i.input.len());
    let mut out = String::new();
    writeln!(out, "dim={dim} count={}", data.len()).unwrap();
    for it in &data.items {
        if it.input.len() != dim {
            return Err(VfdError::LengthMismatch {
                expected: dim,
                found: it.input.len(),
            });
        }
        write!(out, "{}", data.class_ids[it.label]).unwrap();
        for v in &it.input.values {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Parse a feature file. Labels are remapped densely in order of first
/// appearance; rows become `(dim, 1, 1)` maps.
pub fn load_feature_file(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let f = std::fs::File::open(path)?;
    parse_feature_file(BufReader::new(f))
}

pub fn parse_feature_file(reader: impl BufRead) -> Result<LabeledDataset> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or(VfdError::Parse {
        line: 1,
        msg: "missing header".into(),
    })??;
    let (dim, count) = parse_header(&header)?;
    let mut items = Vec::with_capacity(count);
    let mut class_ids: Vec<u64> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_str = fields.next().unwrap_or("").trim();
        let label: u64 = label_str.parse().map_err(|_| VfdError::Parse {
            line: lineno,
            msg: format!("non-integer label {label_str:?}"),
        })?;
        let values = fields
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| VfdError::Parse {
                    line: lineno,
                    msg: format!("bad value {s:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(VfdError::Parse {
                line: lineno,
                msg: format!("row has {} values, header says dim={dim}", values.len()),
            });
        }
        let dense = match class_ids.iter().position(|&c| c == label) {
            Some(p) => p,
            None => {
                class_ids.push(label);
                class_ids.len() - 1
            }
        };
        items.push(Item {
            input: FeatureMap::from_flat(values),
            label: dense,
        });
    }
    if items.len() != count {
        return Err(VfdError::Parse {
            line: 1,
            msg: format!("header says count={count}, found {} rows", items.len()),
        });
    }
    Ok(LabeledDataset {
        items,
        class_ids,
        split: None,
        provenance: Provenance::File,
    })
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let bad = |msg: &str| VfdError::Parse {
        line: 1,
        msg: format!("malformed header {header:?}: {msg}"),
    };
    let mut dim = None;
    let mut count = None;
    for tok in header.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        let v: usize = v.parse().map_err(|_| bad("non-integer value"))?;
        match k {
            "dim" => dim = Some(v),
            "count" => count = Some(v),
            _ => return Err(bad("unknown key")),
        }
    }
    Ok((
        dim.ok_or_else(|| bad("missing dim"))?,
        count.ok_or_else(|| bad("missing count"))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            n_base_classes: 3,
            n_novel_classes: 2,
            latent_dim: 4,
            feature_shape: (4, 2, 2),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_spec() {
        let a = make_task_spec(&small_config()).unwrap();
        let b = make_task_spec(&small_config()).unwrap();
        assert_eq!(a, b);
        let mut other = small_config();
        other.seed = 8;
        assert_ne!(a, make_task_spec(&other).unwrap());
    }

    #[test]
    fn zero_variation_collapses_each_class() {
        let mut cfg = small_config();
        cfg.shared_variation_scales = Some(vec![0.0; 4]);
        let spec = make_task_spec(&cfg).unwrap();
        let ds = sample_dataset(&spec, 5, Split::BaseTrain, 1).unwrap();
        for class in ds.indices_by_class() {
            for &i in &class[1..] {
                assert_eq!(ds.items[i].input, ds.items[class[0]].input);
            }
        }
        // distinct classes still differ
        assert_ne!(ds.items[0].input, ds.items[5].input);
    }

    #[test]
    fn minimal_one_dimensional_factor_space() {
        let cfg = SynthConfig {
            n_base_classes: 1,
            n_novel_classes: 1,
            latent_dim: 1,
            feature_shape: (2, 1, 1),
            ..SynthConfig::default()
        };
        let spec = make_task_spec(&cfg).unwrap();
        assert_eq!(spec.class_prototypes.len(), 2);
        assert!(spec.class_prototypes.iter().all(|p| p.len() == 1));
        assert_ne!(spec.class_prototypes[0][0], spec.class_prototypes[1][0]);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut cfg = small_config();
        cfg.latent_dim = 17;
        assert!(matches!(make_task_spec(&cfg), Err(VfdError::InvalidConfig(_))));
        let mut cfg = small_config();
        cfg.n_base_classes = 0;
        assert!(make_task_spec(&cfg).is_err());
        let mut cfg = small_config();
        cfg.shared_variation_scales = Some(vec![1.0, -1.0, 1.0, 1.0]);
        assert!(make_task_spec(&cfg).is_err());
    }

    #[test]
    fn empty_and_deterministic_datasets() {
        let spec = make_task_spec(&small_config()).unwrap();
        assert!(sample_dataset(&spec, 0, Split::Novel, 3).unwrap().is_empty());
        let a = sample_dataset(&spec, 4, Split::Novel, 3).unwrap();
        let b = sample_dataset(&spec, 4, Split::Novel, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_ids, vec![3, 4]);
        assert!("bogus".parse::<Split>().is_err());
    }

    #[test]
    fn variation_std_matches_scale() {
        let mut cfg = small_config();
        cfg.shared_variation_scales = Some(vec![0.5; 4]);
        let spec = make_task_spec(&cfg).unwrap();
        let mut rng = rng::seeded(11);
        let factors = sample_factors(&spec, 0, 10_000, &mut rng);
        for j in 0..4 {
            let proto = spec.class_prototypes[0][j];
            let var = factors.iter().map(|f| (f[j] - proto).powi(2)).sum::<f64>() / 10_000.0;
            let sd = var.sqrt();
            assert!((sd - 0.5).abs() / 0.5 < 0.05, "dim {j}: {sd}");
        }
    }

    #[test]
    fn feature_file_errors() {
        let short = "dim=4 count=1\n0,1,2,3\n";
        let err = parse_feature_file(short.as_bytes()).unwrap_err();
        assert!(matches!(err, VfdError::Parse { line: 2, .. }), "{err}");
        assert!(parse_feature_file("dims=4\n".as_bytes()).is_err());
        assert!(parse_feature_file("dim=1 count=1\nx,1.0\n".as_bytes()).is_err());
        assert!(parse_feature_file("dim=1 count=1\n1.5,1.0\n".as_bytes()).is_err());
    }

    #[test]
    fn feature_file_three_rows() {
        let text = "dim=4 count=3\n5,1,2,3,4\n2,0.5,0.25,1e-3,-7\n5,0,0,0,0\n";
        let ds = parse_feature_file(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.items.iter().all(|i| i.input.shape == (4, 1, 1)));
        assert_eq!(ds.class_ids, vec![5, 2]);
        assert_eq!(ds.items.iter().map(|i| i.label).collect::<Vec<_>>(), vec![0, 1, 0]);
    }
}
