//! Experiment harness: config files, a seeded sweep runner, an on-disk
//! result store, and CSV reporting on top of `resource_lab`.

pub mod cli;
pub mod config;
pub mod error;
pub mod report;
pub mod store;
pub mod sweep;

pub use config::{ConfigFile, ExperimentConfig, FitWindow};
pub use error::{HarnessError, Result};
pub use store::{CellKey, ResultStore, RunResult};
