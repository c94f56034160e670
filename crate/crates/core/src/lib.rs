//! Few-shot pose-guided dance synthesis with temporal-aware meta-learning.

pub mod error;
pub mod experiment;
pub mod loss;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod params;
pub mod sampling;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
