//! Minimal reverse-mode tensor engine.
//!
//! Storage is f32; reductions (sums, softmax normalizers, cosine norms,
//! bias gradients) accumulate in f64 in a fixed row-major order, so results do
//! not depend on scheduling. The graph is built during the forward pass and
//! released once the root and its intermediates are dropped.

mod error;
mod gemm;
pub mod ops;
pub mod optim;
mod tensor;

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

pub use error::{AutodiffError, Result};
pub use optim::{sgd_step, GroupTag, OptimState, ParamGroup};
pub use tensor::{no_grad, Tensor};
