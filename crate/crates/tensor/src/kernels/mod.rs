//! Forward and backward kernels on raw buffers. The tape wraps these; they
//! are also usable directly for inference paths that never need gradients.

pub mod conv;
pub mod norm;
pub mod shape;
pub mod softmax;
