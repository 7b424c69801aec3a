//! Configuration, artifact formats and stage orchestration behind the CLI.

pub mod config;
pub mod experiment;
pub mod io;

pub use config::{ExperimentConfig, Stage};
pub use experiment::{Experiment, HarnessError};
