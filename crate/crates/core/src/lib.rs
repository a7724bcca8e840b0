//! Feature-field selection for deep CTR models.
//!
//! The central estimator scores each categorical field by the displacement
//! between its embedding and a non-informative baseline, multiplied by the
//! mean loss gradient over equidistant anchor points on the straight path
//! between the two. Around it sit a small reverse-mode core, the CTR model
//! family, data ingestion, baseline constructions, comparator estimators, an
//! Adam trainer with an importance regularizer, the select-and-retrain
//! pipeline, and deterministic bias demonstrations.

pub mod autodiff;
pub mod baselines;
pub mod biaslab;
pub mod data;
pub mod error;
pub mod importance;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

/// Version string written into manifests and model files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
