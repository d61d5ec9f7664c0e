//! Library half of the `cotnav` command: configuration, the experiment
//! harness and subcommands. The binary is a thin clap wrapper.

pub mod commands;
pub mod config;
pub mod experiment;

pub use config::RunConfig;
