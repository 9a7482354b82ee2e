//! Experiment harness: configuration, artifact persistence, pipeline
//! subcommands, and result aggregation. The `bgc` binary is a thin wrapper
//! over this library.

pub mod config;
pub mod persist;
pub mod runner;

pub use config::ExperimentConfig;
pub use runner::{cmd_attack, cmd_condense, cmd_eval, cmd_report, CliError, RunOptions};
