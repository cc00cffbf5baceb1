//! Command-line layer: configuration, checkpoints, result logs, the
//! two-stage sweep protocol, throughput benchmarks and reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod records;
pub mod report;
pub mod svg;

pub use error::{CliError, Result};
