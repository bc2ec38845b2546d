//! Steering a frozen autoregressive language model by perturbing its hidden
//! activations.
//!
//! A small trainable interface network maps tapped hidden states of a frozen
//! transformer to additive perturbations that are injected back at the same
//! tap points during a second, controlled forward pass. The crate covers the
//! full pipeline at desk scale: a reverse-mode autodiff engine, a toy
//! character-level transformer, controlled generation, dataset curation,
//! adversarial training of the interface against a content classifier and a
//! discriminator, and an evaluation harness.

pub mod checkpoint;
pub mod control;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod models;
pub mod lm;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
