//! Experiment runner for the `sparsebyz` simulator: config files, metrics
//! CSVs, run manifests, mask generation and SVG plots.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod plot;

pub use error::CliError;
