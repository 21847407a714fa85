//! Command-line front end: configuration, setup and the subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod setup;

pub use commands::{Algorithm, Experiment, Metric, ReproduceOptions};
pub use config::ExperimentConfig;
pub use error::CliError;
