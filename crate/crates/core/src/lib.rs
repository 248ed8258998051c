//! Variational feature disentanglement for few-shot feature augmentation.
//!
//! A backbone maps inputs to spatial feature maps `X`, pooled into a
//! class-specific vector `z_I`. A variational encoder models the remaining
//! intra-class variation `z_V ~ N(μ, σ²)` so that `z = z_I + z_V`; novel
//! support features are augmented by resampling `z_V` from each instance's
//! own posterior.

pub mod analysis;
pub mod backbone;
pub mod classifier;
pub mod covariance;
pub mod episode;
pub mod error;
pub mod eval;
pub mod feature;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Result, VfdError};
pub use feature::{FeatureMap, Item, LabeledDataset, Provenance, Split};
pub use loss::{LatentStats, LossBreakdown};
