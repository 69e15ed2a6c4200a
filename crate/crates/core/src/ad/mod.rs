//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::check_gradients;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
