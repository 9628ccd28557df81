//! Experiment harness: configuration, the training loop, evaluation,
//! reporting, gradient verification, and the hyperparameter sweep.

pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod report;
pub mod sweep;
pub mod trainer;

pub use config::ExperimentConfig;
pub use report::RunReport;
