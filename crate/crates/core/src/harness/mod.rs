//! Experiment configuration, the multi-seed runner and run comparison.

pub mod compare;
pub mod config;
pub mod runner;

pub use compare::{compare_runs, load_traces, Comparison, RunTrace};
pub use config::ExperimentConfig;
pub use runner::{run_experiment, run_trial, ExperimentOutcome, SummaryFile, TrialOutput};
