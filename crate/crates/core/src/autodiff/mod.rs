//! Reverse-mode differentiation over dense arrays.

mod gradcheck;
mod kernels;
mod ops;
mod param;
mod tape;

pub use gradcheck::{grad_check, grad_check_fn, sample_inputs};
pub use kernels::{broadcast_shape, Interp, NdArray};
pub use ops::{forward_op, OpAttrs, OpKind};
pub use param::{Adam, ParamId, Parameter};
pub use tape::{concat, Gradients, Tape, Var};

pub(crate) use kernels::resize_hw;
