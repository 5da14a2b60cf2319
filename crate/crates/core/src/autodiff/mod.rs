//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Forward ops are methods on [`Tape`]; each records its backward rule when
//! any input requires a gradient. [`Tape::backward`] replays the record in
//! reverse and accumulates gradients into the leaves.

mod gradcheck;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{BatchNormStats, CustomBackward};
pub use tape::{Param, Tape, Var};
pub use tensor::{Real, Tensor};
