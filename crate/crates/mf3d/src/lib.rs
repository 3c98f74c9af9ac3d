//! File formats, checkpoints, configuration and commands for `mf3d-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
mod error;
pub mod records;

pub use error::{CliError, Result};
