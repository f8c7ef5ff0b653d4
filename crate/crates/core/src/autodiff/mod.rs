//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_EPSILON, RELATIVE_FLOOR};
pub use tape::{log_sum_exp, softmax_slice, Tape, Var};
pub use tensor::Tensor;
