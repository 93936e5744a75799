//! Rank-4 tensors, the differentiation tape and gradient checking.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, relative_error, GradCheck};
pub use tape::{Gradients, Mode, RunningStats, Tape, Var};
pub use tensor::{Scalar, Shape4, Tensor};
