//! Minimal reverse-mode automatic differentiation in f64, plus the few
//! numerical utilities the rest of the workspace needs: a deterministic
//! PRNG, a named parameter store, AdamW, and a finite-difference gradient
//! checker.
//!
//! The execution model is a dynamic tape confined to one training step:
//! bind parameters as leaves, build the loss, call [`Tape::backward`],
//! pull gradients, drop the tape. Tensors are immutable after
//! construction except for their gradient buffers, so independent steps
//! (for example evaluation next to training) may run on separate threads
//! with separate tapes.

pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use optim::AdamW;
pub use params::{Binding, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Degenerate-vector guard used by l2 normalization and cosine similarity.
pub const NORM_EPS: f64 = 1e-12;
