//! File formats, pipeline stages and the command line around `osgate-core`.
//!
//! A dataset split lives in a container directory (see [`container`]); the
//! pipeline turns a training split into `models.json`, a validation split
//! into `calibration.json`, and the two test splits into per-mode reports.

pub mod artifacts;
pub mod cli;
pub mod container;
mod error;
pub mod json;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
