//! Configuration, result files and subcommands of the `hierts` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{ConfigError, ExperimentConfig, Overrides, Preset};
pub use error::{CliError, Result};
