//! Multi-head self-attention with key/value token compression.
//!
//! Queries are computed on every token of the `H x W` grid. Keys and values
//! are merged over `R x R` windows before the scaled dot product, so the
//! score matrix is `N x N/R^2` instead of `N x N`:
//!
//! ```text
//! Attention(Q, K, V) = softmax(Q f_c(K)^T / sqrt(d_k)) f_c(V)
//! ```
//!
//! `f_c` is one of [`CompressionOp`]. Compression happens in full channel
//! space before the head split, and the conv operator shares one kernel and
//! one layer norm between keys and values.

mod attention;
mod compress;
mod grid;
mod spec;

pub use attention::{
    dense_attention, kv_compressed_attention, mha_backward, mha_forward, self_attention_backward,
    self_attention_forward, AttentionWeights, AttnCache, AttnGrads, AttnView, MhaCache,
};
pub use compress::{
    compress_backward, compress_forward, compress_tokens, conv_avg_init, CompressCache, ConvGrads, ConvView,
    ConvWeights,
};
pub use grid::TokenGrid;
pub use spec::{score_matrix_shape, CompressionOp, CompressionSpec, LayerPreset, PadMode, PoolMode};
