//! Experiment driver behind the `llpco` binary: JSON configs, scenario
//! wiring, and the `generate`, `train`, `eval` and `report` commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use config::{ExperimentConfig, Scenario};
pub use error::{CliError, Result};
