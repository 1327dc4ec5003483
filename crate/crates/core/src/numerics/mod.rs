//! Dense `f64` tensors, a reverse-mode differentiation tape and a
//! finite-difference gradient checker.

mod gemm;
pub mod gradcheck;
pub mod io;
mod seq;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, Coverage, GradCheckReport};
pub use tape::{SeqLayout, Tape, Var};
pub use tensor::Tensor;
