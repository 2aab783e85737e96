//! Dense matrix engine with reverse-mode automatic differentiation.
//!
//! Gradients are built from the same recorded operations as the forward
//! pass, so a gradient can itself be part of a loss and differentiated again.
//! This is what lets force-matching losses be trained: the forces are
//! `dE/dr` and the loss needs `d(loss)/d(params)` through them.

mod tape;
mod tensor;
mod unary;

pub use tape::{Precision, Tape, Var};
pub use tensor::Tensor;
pub use unary::Unary;
