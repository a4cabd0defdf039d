//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Shapes are row-major. Broadcasting is limited to a single row vector over
//! the last axis (`add_row`, `mul_row`). Reductions run serially in index
//! order, so identical inputs always give bitwise-identical outputs.

mod element;
mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_coords};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
