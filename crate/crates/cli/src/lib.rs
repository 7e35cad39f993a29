//! File formats, configuration and subcommands of the `nrsfm-uq` binary.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use error::{CliError, CliResult};
