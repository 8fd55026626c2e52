//! Command-line pipeline: dataset generation, staged training, inference,
//! evaluation and the temperature/Beta ablation grid.

pub mod config;
pub mod pipeline;

pub use config::{ConfigError, PriorMode, RunConfig};
