//! Experiment harness: configs, trained artifacts, scenario runs, metrics and reports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod lab;
pub mod metrics;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, Report};
pub use lab::Lab;
