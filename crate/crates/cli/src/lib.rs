//! Experiment pipeline behind the `repudiate` command: configuration,
//! in-memory stages, and the file-based subcommands wrapping them.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
