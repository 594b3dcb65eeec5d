//! The `acd` command-line tool: data generation, training and evaluation.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod svg;

pub use commands::{run, RunManifest};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
