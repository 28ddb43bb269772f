//! Multi-annotator segmentation with annotator-routed kernels and
//! prototype-based annotator assignment.

pub mod assigner;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod explain;
mod error;
pub mod image;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Result, TaxError};
