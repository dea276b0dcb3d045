//! Experiment runner for the dedetr detector: run configuration, binary
//! checkpoints, dataset files, an append-only run registry and
//! plot-ready report tables.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod registry;
pub mod report;

pub use config::RunConfig;
pub use error::CliError;
