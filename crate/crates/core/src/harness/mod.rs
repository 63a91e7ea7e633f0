//! Operational shell: synthetic data, configs, persistence, reports and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod report;
pub mod runlog;
