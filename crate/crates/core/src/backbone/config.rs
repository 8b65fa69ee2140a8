use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::kvattn::CompressionSpec;

/// Hyperparameters of the toy diffusion transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Positional-embedding grid `(Hp, Wp)` in patches.
    pub grid: (usize, usize),
    /// Image (latent) channels in and out.
    pub in_channels: usize,
    pub cond_vocab: usize,
    pub cond_dim: usize,
    /// Condition labels per sample.
    pub cond_tokens: usize,
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub compression: Vec<CompressionSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// D=4, C=32, 2 heads, p=2, 8x8 patch grid (16x16 images), 16 labels.
    pub fn toy() -> Self {
        Self {
            depth: 4,
            channels: 32,
            heads: 2,
            patch_size: 2,
            grid: (8, 8),
            in_channels: 3,
            cond_vocab: 16,
            cond_dim: 16,
            cond_tokens: 4,
            time_embed_dim: 32,
            mlp_ratio: 4,
            compression: Vec::new(),
        }
    }

    /// D=2, C=16, 2 heads, p=2, 4x4 patch grid. Small enough for exhaustive
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            channels: 16,
            heads: 2,
            patch_size: 2,
            grid: (4, 4),
            in_channels: 2,
            cond_vocab: 16,
            cond_dim: 8,
            cond_tokens: 4,
            time_embed_dim: 16,
            mlp_ratio: 2,
            compression: Vec::new(),
        }
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid.0 * self.patch_size, self.grid.1 * self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("depth", self.depth),
            ("channels", self.channels),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("grid height", self.grid.0),
            ("grid width", self.grid.1),
            ("in_channels", self.in_channels),
            ("cond_vocab", self.cond_vocab),
            ("cond_dim", self.cond_dim),
            ("cond_tokens", self.cond_tokens),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                bail!(Config, "model {name} must be positive");
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            bail!(Config, "channels {} not divisible by heads {}", self.channels, self.heads);
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            bail!(Config, "time_embed_dim must be a positive even number");
        }
        for (i, s) in self.compression.iter().enumerate() {
            s.validate(self.depth)?;
            s.output_grid(self.grid.0, self.grid.1)?;
            for t in &self.compression[..i] {
                if s.layers.0 <= t.layers.1 && t.layers.0 <= s.layers.1 {
                    bail!(
                        Config,
                        "compression ranges {:?} and {:?} overlap",
                        t.layers,
                        s.layers
                    );
                }
            }
        }
        Ok(())
    }

    /// The compression spec covering 1-based block `block`, if any.
    pub fn spec_for_block(&self, block: usize) -> Option<&CompressionSpec> {
        self.compression.iter().find(|s| s.covers(block))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvattn::{CompressionOp, LayerPreset};

    #[test]
    fn toy_defaults() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.image_size(), (16, 16));
        assert_eq!(c.tokens(), 64);
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let mut c = ModelConfig::toy();
        c.depth = 8;
        c.compression = vec![
            CompressionSpec::new(CompressionOp::Conv, 2, LayerPreset::Deep.range(8)),
            CompressionSpec::new(CompressionOp::Pool, 2, (4, 5)),
        ];
        assert!(c.validate().is_err());
        c.compression[1].layers = (1, 4);
        c.validate().unwrap();
        assert_eq!(c.spec_for_block(4).unwrap().op, CompressionOp::Pool);
        assert_eq!(c.spec_for_block(5).unwrap().op, CompressionOp::Conv);
    }

    #[test]
    fn grid_must_be_compressible() {
        let mut c = ModelConfig::toy();
        c.grid = (6, 6);
        c.compression = vec![CompressionSpec::new(CompressionOp::Pool, 4, (1, 2))];
        assert!(c.validate().is_err());
    }
}
