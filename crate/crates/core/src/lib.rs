//! Post-hoc open-set gating for embedding-based object detectors.
//!
//! The crate is `no_std` (with `alloc`) and holds every numerical piece of
//! the pipeline: box matching, per-class Gaussian and mixture density
//! models, softmax/GMM uncertainty scores, temperature calibration, joint
//! thresholding and the evaluation metrics. File formats, parallelism and
//! the command line live in the `osgate` companion crate.
#![cfg_attr(not(feature = "std"), no_std)]

#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod assignment;
pub mod calibration;
pub mod density;
mod error;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod scoring;
pub mod synthgen;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
