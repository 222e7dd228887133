//! Command-line front-end: configuration, CSV ingestion, the `set`, `boundary`, `mc`,
//! `forecast` and `audit` pipelines, and their output tables.

pub mod commands;
pub mod config;
pub mod ingest;
pub mod output;
pub mod synth;

pub use commands::{run, Command};
pub use config::{Overrides, RunConfig};
