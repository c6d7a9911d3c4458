//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are recorded with
//! [`Tape::leaf`], [`Tape::param`] or [`Tape::constant`]; every operation on a
//! [`Var`] appends one node, and [`Tape::backward`] walks the nodes in reverse
//! accumulating gradients into the leaves that asked for them.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradient, grad_check, max_relative_error, numeric_gradient, Gradients};
pub use tape::{concat, Reduction, Tape, Var};
pub use tensor::{DType, Real, Tensor};
