//! Configuration, checkpoints, training loop and command-line front end
//! of the `metaforge` tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod train;

pub use commands::run;
pub use error::{CliError, Result};
