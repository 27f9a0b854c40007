//! Configuration handling and the `analyze`, `equilibrium`, `simulate` and
//! `verify` commands of the `msentropy` tool.

pub mod commands;
pub mod config;

pub use commands::{execute, CliError, Command, Options, Outcome};
