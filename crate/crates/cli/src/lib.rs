//! Command-line tools and the HTTP lever service of the prosody workbench.

pub mod args;
pub mod commands;
pub mod config;
pub mod server;

pub use args::{Cli, Command};

/// A command line that parsed but cannot be acted on (exit status 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);
