//! Command-line front end: configuration loading, builtin scenarios by
//! name, the five commands and their artifacts.

pub mod app;
pub mod artifacts;
pub mod commands;
pub mod config;

pub use app::{run_cli, Cli};
pub use config::{load_instance, RunConfig, SCHEMA_VERSION};
