//! File formats, experiment commands and reports around `depth-dissect-core`.

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod export;
pub mod formats;
pub mod parallel;
pub mod record;
pub mod report;

pub use error::{Error, Result};
