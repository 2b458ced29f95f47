//! Experiment runner for paired-classifier partial domain adaptation.
//!
//! Wraps `twins-core` with the parts that need `std`: IDX ingestion,
//! checkpoints, TOML configs, CSV/JSON outputs and the run/sweep/ablation
//! drivers behind the `twins` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod idx;
pub mod results;
pub mod runner;

pub use error::{Error, Result};
