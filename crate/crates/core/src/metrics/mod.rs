//! Open-set and detection-quality metrics.

mod eval;
mod map;
mod roc;

pub use eval::*;
pub use map::*;
pub use roc::*;
