//! Key/value token-compressed self-attention for diffusion transformers.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense f64 tensors, hand-written reverse-mode kernels,
//!   a seeded generator and a finite-difference gradient checker.
//! * [`kvattn`]: multi-head attention whose keys and values are merged over
//!   `R x R` spatial windows while every query token is kept.
//! * [`backbone`]: a small diffusion transformer with learnable positional
//!   embeddings and per-block compression placement.
//! * [`diffusion`]: noise schedule, epsilon-prediction training and sampling.
//! * [`w2s`]: weak-to-strong adaptation races (codec swap, resolution
//!   upscale, compression retrofit).
//! * [`bench`]: exact FLOP accounting and wall-clock sweeps.
//! * [`data`]: deterministic synthetic image datasets.

pub mod backbone;
pub mod bench;
pub mod data;
pub mod diffusion;
mod error;
pub mod kvattn;
pub mod numerics;
pub mod svg;
pub mod w2s;

pub use backbone::{Dit, ModelConfig, ParamStore};
pub use error::{Error, Result};
pub use kvattn::{CompressionOp, CompressionSpec, TokenGrid};
pub use numerics::{Rng, Tensor};
