use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};

/// The compression operator `f_c` applied to keys and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionOp {
    None,
    /// Keep the top-left token of each window (strided subsampling).
    Discard,
    /// Average (or, with [`PoolMode::Nearest`], nearest-neighbour) pooling.
    Pool,
    /// Learnable per-channel `R x R` convolution followed by layer norm.
    Conv,
}

impl CompressionOp {
    pub const ALL: [CompressionOp; 4] = [Self::None, Self::Discard, Self::Pool, Self::Conv];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Discard => "discard",
            Self::Pool => "pool",
            Self::Conv => "conv",
        }
    }
}

impl fmt::Display for CompressionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompressionOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "discard" | "uniform" => Ok(Self::Discard),
            "pool" | "ave" => Ok(Self::Pool),
            "conv" => Ok(Self::Conv),
            _ => bail!(Config, "unknown compression operator {s:?} (expected none|discard|pool|conv)"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Arithmetic mean of each window.
    #[default]
    Mean,
    /// Nearest-neighbour downsampling by `1/R`. With floor indexing this
    /// picks the top-left token, i.e. the same tokens as `Discard`.
    Nearest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Grids whose sides are not multiples of `R` are a layout error.
    #[default]
    Reject,
    /// Replicate the last row/column until the sides are multiples of `R`.
    Edge,
}

/// Where and how keys/values are compressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionSpec {
    pub op: CompressionOp,
    /// Window side `R`; the token count shrinks by `R^2`.
    pub stride: usize,
    /// Inclusive, 1-based block range.
    pub layers: (usize, usize),
    #[serde(default)]
    pub pool_mode: PoolMode,
    #[serde(default)]
    pub pad: PadMode,
}

impl CompressionSpec {
    pub fn new(op: CompressionOp, stride: usize, layers: (usize, usize)) -> Self {
        Self {
            op,
            stride,
            layers,
            pool_mode: PoolMode::Mean,
            pad: PadMode::Reject,
        }
    }

    /// A spec that leaves attention dense.
    pub fn none() -> Self {
        Self::new(CompressionOp::None, 1, (1, 1))
    }

    pub fn with_pool_mode(mut self, mode: PoolMode) -> Self {
        self.pool_mode = mode;
        self
    }

    pub fn with_pad(mut self, pad: PadMode) -> Self {
        self.pad = pad;
        self
    }

    /// `R = 1` or operator `none`: keys and values pass through untouched.
    pub fn is_identity(&self) -> bool {
        self.op == CompressionOp::None || self.stride == 1
    }

    /// Whether the spec carries learnable conv/norm weights.
    pub fn has_conv_weights(&self) -> bool {
        self.op == CompressionOp::Conv && self.stride > 1
    }

    pub fn covers(&self, block: usize) -> bool {
        (self.layers.0..=self.layers.1).contains(&block)
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.stride == 0 {
            bail!(Config, "compression stride must be >= 1");
        }
        let (lo, hi) = self.layers;
        if lo == 0 || lo > hi || hi > depth {
            bail!(Config, "layer range {lo}..={hi} is not within 1..={depth}");
        }
        Ok(())
    }

    /// Compressed grid extents for an `h x w` grid.
    pub fn output_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.is_identity() {
            return Ok((h, w));
        }
        let r = self.stride;
        if !h.is_multiple_of(r) || !w.is_multiple_of(r) {
            match self.pad {
                PadMode::Reject => bail!(Layout, "grid {h}x{w} is not divisible by compression stride {r}"),
                PadMode::Edge => return Ok((h.div_ceil(r), w.div_ceil(r))),
            }
        }
        Ok((h / r, w / r))
    }
}

/// Proportional placements of compression within a depth-`D` model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerPreset {
    Shallow,
    Middle,
    Deep,
}

impl LayerPreset {
    /// Inclusive 1-based range: shallow `(1, ceil(D/2))`, middle
    /// `(ceil(D/4)+1, ceil(3D/4))`, deep `(floor(D/2)+1, D)`.
    pub fn range(self, depth: usize) -> (usize, usize) {
        match self {
            Self::Shallow => (1, depth.div_ceil(2)),
            Self::Middle => (depth.div_ceil(4) + 1, (3 * depth).div_ceil(4)),
            Self::Deep => (depth / 2 + 1, depth),
        }
    }
}

impl FromStr for LayerPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(Self::Shallow),
            "middle" => Ok(Self::Middle),
            "deep" => Ok(Self::Deep),
            _ => bail!(Config, "unknown layer preset {s:?} (expected shallow|middle|deep)"),
        }
    }
}

/// Shape of the attention score matrix for `n` tokens on a square grid
/// compressed with stride `r`: `(N, N / R^2)`.
pub fn score_matrix_shape(n: usize, r: usize) -> Result<(usize, usize)> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        bail!(Layout, "{n} tokens do not form a square grid");
    }
    if r == 0 || !side.is_multiple_of(r) {
        bail!(Layout, "grid side {side} is not divisible by stride {r}");
    }
    Ok((n, n / (r * r)))
}
