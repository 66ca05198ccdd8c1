//! File formats, config loading and command implementations behind the
//! `lsra` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod manifest;

pub use config::RunConfig;
pub use error::{CliError, Result};
