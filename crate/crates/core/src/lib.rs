//! RFC-Net: a segmentation network whose tree of loosely-densely connected
//! layers chains together every combination of a small set of receptive
//! fields, plus the tensor engine, cost model, and training recipe around it.

pub mod analysis;
pub mod autodiff;
pub mod data;
mod error;
pub mod ldcs;
pub mod rfcnet;
pub mod training;

pub use error::{Error, Result};
