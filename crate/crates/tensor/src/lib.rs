//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Model code is written against [`Ops`] and runs either eagerly or on a
//! scoped [`Tape`]. All tensors are immutable; every exported operation
//! checks its output for non-finite values.

mod checkpoint;
mod error;
mod gradcheck;
mod op;
mod ops;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, ParamSet, FORMAT_VERSION};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, primitive_gradient_suite, PrimitiveCheck};
pub use op::{Op, LOG1M_CLAMP};
pub use ops::{Eager, Ops};
pub use tape::{backward, Gradients, Tape};
pub use tensor::{NodeId, Tensor};
