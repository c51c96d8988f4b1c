//! Dense row-major `f64` tensors and a define-by-run reverse-mode tape.
//!
//! Every forward computation is recorded on a [`Tape`] as it runs; values are
//! addressed through cheap [`Var`] handles. A single call to
//! [`Tape::backward`] on a scalar root fills in the gradient of every leaf
//! created with [`Tape::param`].
//!
//! Broadcasting is deliberately narrow: a binary op accepts two tensors of
//! the same shape, a right-hand operand holding a single element, or a
//! right-hand row vector whose length matches the left operand's last axis.

mod error;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
