//! Experiment harness: configs and presets, the train/eval/attack runner,
//! and the report generator behind the `tosc` command.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, Scheme};
pub use error::{BenchError, Result};
