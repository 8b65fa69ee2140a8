use crate::error::{bail, Result};
use crate::kvattn::CompressionOp;

/// Itemised forward FLOPs of one self-attention call on one sample.
///
/// A multiply-add counts as two FLOPs. Softmax is three per score (exp
/// after max subtraction, sum, divide); the `1/sqrt(d)` scale is folded
/// into the score product.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostTerms {
    pub qkv_projection: u64,
    pub compression: u64,
    pub scores: u64,
    pub softmax: u64,
    pub weighted_sum: u64,
    pub output_projection: u64,
}

impl CostTerms {
    pub fn total(&self) -> u64 {
        self.qkv_projection + self.compression + self.scores + self.softmax + self.weighted_sum + self.output_projection
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub n: usize,
    /// Compressed key/value token count `N / R^2`.
    pub n_kv: usize,
    pub channels: usize,
    pub heads: usize,
    pub stride: usize,
    pub op: CompressionOp,
    pub terms: CostTerms,
}

impl CostModel {
    /// Scores plus weighted sum, the two `O(N N')` products.
    pub fn quadratic_terms(&self) -> u64 {
        self.terms.scores + self.terms.weighted_sum
    }

    pub fn total(&self) -> u64 {
        self.terms.total()
    }
}

/// Cost on a square grid of `n` tokens with the conv operator.
pub fn flops_attention(n: usize, channels: usize, heads: usize, stride: usize) -> Result<CostModel> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        bail!(Layout, "{n} tokens do not form a square grid");
    }
    flops_attention_grid(side, side, channels, heads, stride, CompressionOp::Conv)
}

/// Cost on an `h x w` grid. The stride must divide both sides.
pub fn flops_attention_grid(h: usize, w: usize, c: usize, heads: usize, r: usize, op: CompressionOp) -> Result<CostModel> {
    if h == 0 || w == 0 || c == 0 || heads == 0 || r == 0 {
        bail!(Layout, "extents must be positive");
    }
    if !c.is_multiple_of(heads) {
        bail!(Layout, "{heads} heads do not divide {c} channels");
    }
    if !h.is_multiple_of(r) || !w.is_multiple_of(r) {
        bail!(Layout, "{h}x{w} grid is not divisible by stride {r}");
    }
    let identity = r == 1 || op == CompressionOp::None;
    let r = if identity { 1 } else { r };
    let n = (h * w) as u64;
    let m = n / (r * r) as u64;
    let (c64, r2) = (c as u64, (r * r) as u64);
    // Applied to both K and V.
    let compression = if identity {
        0
    } else {
        match op {
            CompressionOp::None | CompressionOp::Discard => 0,
            // R^2 - 1 adds and one scale per output element.
            CompressionOp::Pool => 2 * m * c64 * r2,
            // Depthwise R x R MACs plus bias, then LayerNorm at 8 FLOPs per element.
            CompressionOp::Conv => 2 * (m * c64 * (2 * r2 + 1) + 8 * m * c64),
        }
    };
    let terms = CostTerms {
        qkv_projection: 2 * n * c64 * 3 * c64,
        compression,
        scores: 2 * n * m * c64,
        softmax: 3 * heads as u64 * n * m,
        weighted_sum: 2 * n * m * c64,
        output_projection: 2 * n * c64 * c64,
    };
    Ok(CostModel {
        n: n as usize,
        n_kv: m as usize,
        channels: c,
        heads,
        stride: r,
        op: if identity { CompressionOp::None } else { op },
        terms,
    })
}
