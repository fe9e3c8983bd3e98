//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records primitive operations as they are applied; calling
//! [`Tape::backward`] on a scalar output sweeps the record in reverse and
//! returns gradients for every differentiable leaf.

mod tape;
mod tensor;

pub use tape::{Gradients, OpKind, Tape, Var};
pub(crate) use tape::sigmoid;
pub use tensor::Tensor;
