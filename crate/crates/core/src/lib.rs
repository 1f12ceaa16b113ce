//! Spatial-context class-balanced losses for long-tailed point-cloud
//! segmentation, with the supporting spatial index, class statistics, a small
//! per-point classifier, a synthetic scene generator and long-tailed metrics.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pointcloud;
pub mod spatial;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use par::Exec;
