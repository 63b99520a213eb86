//! Dense `f32` tensors with a per-pass reverse-mode tape.
//!
//! Storage is row-major and contiguous; reductions accumulate in `f64`.
//! A [`Tape`] records one forward pass and is confined to one worker.

mod error;
pub mod kernels;
pub mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::Index;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
