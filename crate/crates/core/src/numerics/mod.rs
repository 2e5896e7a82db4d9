//! Dense tensors, reverse-mode autodiff and the finite-difference checker.

mod cosine;
pub mod dump;
mod gradcheck;
mod tape;
mod tensor;

pub use cosine::cosine_similarity;
pub use gradcheck::{grad_check, grad_check_inputs, relative_error, GradCheckReport};
pub use tape::{concat_rows, Tape, Var};
pub use tensor::Tensor;
