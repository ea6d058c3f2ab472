//! Experiment plumbing: run configs, dataset files, metrics, reports, plots
//! and the command-line front end.

pub mod cli;
pub mod config;
pub mod loaders;
pub mod metrics;
pub mod plot;
pub mod report;
