//! Filesystem side of the stratdiff laboratory: binary checkpoint and dataset
//! formats, TOML run configs, metrics logs, run directories, curve aggregation
//! and the `stratdiff` command line.

pub mod checkpoint;
pub mod cli;
mod codec;
pub mod config;
pub mod dataset;
mod error;
pub mod metrics;
pub mod plot;
pub mod run;

pub use error::{LabError, Result};
