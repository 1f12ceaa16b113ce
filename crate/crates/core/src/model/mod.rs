//! Per-point classifier: geometric features, a small network and its trainer.

pub mod features;
pub mod mlp;
pub mod train;

pub use features::{extract_features, EigenFeatures, FeatureConfig, PointFeatures, FEATURE_DIM};
pub use mlp::Classifier;
pub use train::{train, OptimizerConfig, TrainConfig, TrainReport};
