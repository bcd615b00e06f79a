//! File formats and command implementations for the `seqload` binary.

pub mod commands;
pub mod error;
pub mod formats;
pub mod manifest;

pub use error::{CliError, Result};
