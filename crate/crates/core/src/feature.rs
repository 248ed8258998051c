//! Spatial feature maps and labeled datasets.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, VfdError};

/// (channels, height, width)
pub type Shape3 = (usize, usize, usize);

/// A channel-major 3-D activation array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub shape: Shape3,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(shape: Shape3, values: Vec<f64>) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        if values.len() != n {
            return Err(VfdError::LengthMismatch {
                expected: n,
                found: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.0 * shape.1 * shape.2],
        }
    }

    /// A flat feature as a `(len, 1, 1)` map.
    pub fn from_flat(values: Vec<f64>) -> Self {
        Self {
            shape: (values.len(), 1, 1),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.shape.0
    }

    pub fn spatial(&self) -> usize {
        self.shape.1 * self.shape.2
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.shape.1 + y) * self.shape.2 + x]
    }

    pub fn reshape(&self, shape: Shape3) -> Result<Self> {
        if shape.0 * shape.1 * shape.2 != self.values.len() {
            return Err(shape_err(shape, self.shape));
        }
        Ok(Self {
            shape,
            values: self.values.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Which side of the base/novel partition a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    BaseTrain,
    Novel,
}

impl std::str::FromStr for Split {
    type Err = VfdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base-train" | "base" => Ok(Split::BaseTrain),
            "novel" => Ok(Split::Novel),
            other => Err(VfdError::Unknown {
                kind: "split",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub input: FeatureMap,
    pub label: usize,
}

/// Labeled inputs of one split.
///
/// `label` values are dense indices `0..n_classes`; `class_ids[label]` is the
/// original class identifier (global class index for synthetic data, the
/// label written in the file for loaded data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub items: Vec<Item>,
    pub class_ids: Vec<u64>,
    pub split: Option<Split>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn input_shape(&self) -> Option<Shape3> {
        self.items.first().map(|i| i.input.shape)
    }

    /// Item indices grouped by dense label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for (i, item) in self.items.iter().enumerate() {
            out[item.label].push(i);
        }
        out
    }

    /// Reshape every input (e.g. flat file rows back into spatial maps).
    pub fn reshape_inputs(&self, shape: Shape3) -> Result<Self> {
        let items = self
            .items
            .iter()
            .map(|it| {
                Ok(Item {
                    input: it.input.reshape(shape)?,
                    label: it.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            class_ids: self.class_ids.clone(),
            split: self.split,
            provenance: self.provenance,
        })
    }

    /// Check that every label lies in `0..n_classes` and class ids are unique.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_classes();
        for it in &self.items {
            if it.label >= n {
                return Err(VfdError::LabelOutOfRange {
                    label: it.label,
                    n_classes: n,
                });
            }
        }
        let mut ids = self.class_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(VfdError::InvalidConfig("duplicate class ids".into()));
        }
        Ok(())
    }
}

/// True when the two datasets share no class identifier.
pub fn disjoint_classes(a: &LabeledDataset, b: &LabeledDataset) -> bool {
    a.class_ids.iter().all(|id| !b.class_ids.contains(id))
}
