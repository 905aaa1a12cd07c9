//! Command-line front end: checkpoints, corpora and the `gdr` subcommands.

pub mod checkpoint;
pub mod commands;
pub mod corpus;
pub mod error;

pub use error::{CliError, Result};
