//! Command implementations behind the `slomo` binary.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::CliError;
