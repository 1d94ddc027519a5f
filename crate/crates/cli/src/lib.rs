//! Library side of the `stiffkin` command: configuration layering and the
//! subcommand implementations.

pub mod commands;
pub mod config;
