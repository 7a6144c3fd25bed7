//! File formats, checkpoints, experiment orchestration and the command-line
//! interface around `zeroddi-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod report;
pub mod run;

pub use error::{Error, Result};
