//! Iterative audio pre-training at desk scale.
//!
//! Clips become 128-bin log-mel filterbanks, then flattened 16x16 patch
//! sequences. An acoustic tokenizer maps patches to discrete labels; a
//! ViT-style model pre-trains by predicting those labels at masked
//! positions; the trained model then teaches the next tokenizer by
//! distillation, and the cycle repeats. Everything runs in f64 on CPU
//! and is deterministic given config and seeds.


pub mod corpus;
pub mod error;
pub mod features;
pub mod io;
pub mod nn;
pub mod rptok;
pub mod sdtok;
pub mod ssl_model;

pub use error::{Error, Result};
