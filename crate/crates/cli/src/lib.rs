//! Experiment driver for the LSLo laboratory: configuration, phase
//! orchestration and on-disk artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

pub use config::{parse_config, ExperimentConfig};
pub use error::CliError;
