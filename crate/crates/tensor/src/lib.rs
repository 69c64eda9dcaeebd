//! Minimal n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; operations on [`Var`] handles record what their
//! backward rules need, and [`Tape::backward`] walks the tape in reverse.
//! Model parameters are kept in a [`ParamStore`] and bound to a tape per pass
//! through a [`Ctx`].

pub mod adam;
pub mod check;
mod error;
pub mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use params::{Ctx, ParamEntry, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tape::{BnMode, BnStats, Grads, Tape, Var};
pub use tensor::{numel, Tensor};
