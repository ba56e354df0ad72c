//! Experiment orchestration: config files, the output tree, and reports.

pub mod config;
pub mod report;
pub mod runner;

pub use config::ExperimentConfig;
pub use report::{DeletionRow, MetricsRow};
pub use runner::{audit, run_experiment, Workspace};
