//! Experiment plumbing around `kvguide`: configuration, scenarios, embedding
//! ingestion, reports and traces.

pub mod config;
pub mod ingest;
pub mod report;
pub mod run;
pub mod scenario;

pub use config::{ExperimentConfig, Model, ScenarioSource};
pub use run::{run_experiment, run_in_memory, ExperimentOutput};
