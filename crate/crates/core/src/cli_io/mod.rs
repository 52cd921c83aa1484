//! Configuration, persistence and the command-line front end.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod metrics;
pub mod tensor_io;

pub use commands::{run_cli, Cli, Command};
pub use config::RunConfig;
pub use manifest::{RunDir, RunManifest};
