//! Experiment runner for `fedshield-core`: config files, round logs,
//! checkpoints, probe caching, sweeps and detection reports.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod format;
pub mod manifest;
pub mod report;
pub mod run;
pub mod sweep;

pub use error::{exit, CliError, Result};
pub use fedshield_core as core;
