//! Command-line harness for the adatoken pipeline: scene generation,
//! attention-dump I/O, analysis, fitting, pruning simulation, benchmarks
//! and cost reports.

pub mod commands;
pub mod config;
pub mod dump;
pub mod error;
pub mod output;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
