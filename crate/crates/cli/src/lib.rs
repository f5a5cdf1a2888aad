//! Reproducible CAW experiments on synthetic concept images: data generation,
//! training, evaluation, threshold sweeps, concept importance and explanations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use config::ExperimentConfig;
pub use error::CliError;
