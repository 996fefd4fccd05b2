//! Dense row-major tensors and a Wengert tape for reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] and addressed through [`Var`] handles. Every primitive registers
//! its forward value and a backward rule. The same graph can be instantiated
//! in `f32` for training and in `f64` for finite-difference checking.

mod error;
pub mod fault;
pub mod gradcheck;
mod scalar;
pub mod suite;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, finite_difference_check, GradCheckReport, StopGradientMode};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Epsilon used by [`Tape::layer_norm`] when the caller does not override it.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Epsilon added to the row norm by [`Tape::l2_normalize_rows`].
pub const L2_NORMALIZE_EPS: f64 = 1e-12;
