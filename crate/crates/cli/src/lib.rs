//! Command-line harness around `hmcseg`: data generation, training,
//! evaluation, reports and the checkpoint file format.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod store;

pub use commands::{run, Command};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
