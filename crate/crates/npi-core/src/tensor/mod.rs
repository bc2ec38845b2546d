//! Minimal differentiable-array engine with reverse-mode gradients and Adam.
//!
//! Everything trainable in this crate is built on these pieces: a shared
//! [`Tensor`] handle, a [`Tape`] recording executed ops for reverse replay,
//! and [`AdamState`] for parameter updates.

mod adam;
mod scalar;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub mod gradcheck;

pub use adam::{AdamConfig, AdamState};
pub use scalar::Scalar;
pub use tape::{Activation, ElementwiseKind, LossKind, Tape};
pub use tensor::Tensor;
