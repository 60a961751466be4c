//! Deterministic training simulator and experiment driver.

pub mod config;
pub mod corpus;
pub mod report;
pub mod runner;
pub mod workload;

pub use config::ExperimentConfig;
pub use report::{IntervalMetrics, MetricsReport, RunSummary};
pub use runner::{model_l2, run, run_with, FailurePoint, FailureSchedule, RunOutcome, SimOptions};
pub use workload::{apply_batch, generate_batch, Batch, TableBatch, Workload, WorkloadConfig};
