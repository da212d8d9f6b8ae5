//! Command-line driver: flat run configs and the `diffgap` subcommands.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Axis, Command};
pub use config::{resolve, CorpusSource, RunConfig, Sources};
pub use error::CliError;
