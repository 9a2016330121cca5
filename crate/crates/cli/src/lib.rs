//! Library behind the `owr` binary: configuration, episode runner and the
//! subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use config::ExperimentConfig;
pub use error::CliError;
