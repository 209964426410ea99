//! Reverse-mode automatic differentiation over dense tensors.

pub(crate) mod kernels;
mod gradcheck;
mod tape;

pub use gradcheck::{central_difference, grad_check};
pub use kernels::{sigmoid, softplus, softplus_inv};
pub use tape::{Gradients, NodeId, Tape, Tensor};
