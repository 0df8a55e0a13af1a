//! Experiment driver: configuration, stage orchestration, persistence and
//! report emission.

pub mod config;
pub mod error;
pub mod artifacts;
pub mod pipeline;
pub mod report;
pub mod stages;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::CliError;
