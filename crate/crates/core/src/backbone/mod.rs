//! A small diffusion transformer.
//!
//! `patchify -> + positional embedding + timestep embedding -> D x [self-attn,
//! cross-attn, MLP] -> final norm/projection -> unpatchify`. Self-attention in
//! blocks covered by a [`CompressionSpec`](crate::CompressionSpec) compresses
//! keys and values; cross-attention to the condition tokens never does.

mod config;
mod model;
mod params;
mod patch;

pub use config::ModelConfig;
pub use model::{mse, BackwardFault, ConvInit, Dit, ForwardCache, Grads, PeInit};
pub use params::{ParamId, ParamStore};
pub use patch::{patchify, patchify_raw, unpatchify, unpatchify_raw};

use crate::error::Result;
use crate::numerics::ops::bilinear_resize_grid;
use crate::numerics::Tensor;

/// Resizes an `Hp x Wp x C` positional-embedding grid with align-corners
/// bilinear interpolation. Identity when the target equals the source.
pub fn resize_positional_embedding(pe: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    bilinear_resize_grid(pe, target)
}
