//! Command-line front end: configuration resolution and subcommand dispatch.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{dispatch, Command};
pub use config::{parse_config, Overrides, Resolved, RunConfig};
pub use error::CliError;
