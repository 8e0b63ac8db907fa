//! Prioritized trace sampling for input-driven RL training.
//!
//! The pipeline runs in three stages: extract per-trace statistical
//! features, cluster traces with a Gaussian mixture searched over seeds and
//! cluster counts, then prioritize clusters — statically (inverse density)
//! or dynamically (driven by an online return predictor). A parametric ABR
//! benchmark and a compact n-step Q-learner make the sampling strategies
//! comparable end to end.

pub mod agent;
pub mod clustering;
pub mod error;
pub mod features;
pub mod nn;
pub mod prioritization;
pub mod rng;
pub mod selection;
pub mod trace;
pub mod tracebench;

pub use error::{Error, Result};
pub use features::{catalog, extract_features, extract_matrix, FeatureMatrix, FeatureSpec};
pub use trace::{discounted_return, load_dataset, save_dataset, ReturnSpec, Trace, TraceDataset};
