//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The primitive set is fixed to what a small transformer needs: matmul,
//! transpose, elementwise add/mul/scale, embedding gather, softmax,
//! log-softmax, log, sigmoid, layer norm, GELU, sum/mean reductions,
//! column slicing/concat and entry selection. No fusion, no broadcasting
//! beyond row-vector bias addition.

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference_check, FdOptions};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
