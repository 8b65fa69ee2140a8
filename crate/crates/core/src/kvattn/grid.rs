use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// A batch of token sequences with an explicit `H x W` layout.
///
/// Stored as `(B, H*W, C)`; token `n` sits at row `n / W`, column `n % W`,
/// so the `(B, H, W, C)` view is the same buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    data: Tensor,
}

impl TokenGrid {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let data = Tensor::new(&[batch, height * width, channels], data)?;
        Ok(Self { height, width, data })
    }

    /// Wraps a `(B, N, C)` tensor whose sequence extent must equal `H * W`.
    pub fn from_tensor(data: Tensor, height: usize, width: usize) -> Result<Self> {
        match *data.shape() {
            [_, n, _] if n == height * width => Ok(Self { height, width, data }),
            ref s => bail!(Layout, "tensor {s:?} does not hold a {height}x{width} token grid"),
        }
    }

    /// Wraps a `(B, H, W, C)` tensor.
    pub fn from_bhwc(data: Tensor) -> Result<Self> {
        match *data.shape() {
            [b, h, w, c] => Ok(Self { height: h, width: w, data: data.reshape(&[b, h * w, c])? }),
            ref s => bail!(Dimension, "expected a [B, H, W, C] tensor, got {s:?}"),
        }
    }

    pub fn to_bhwc(&self) -> Tensor {
        let (b, h, w, c) = (self.batch(), self.height, self.width, self.channels());
        self.data.clone().reshape(&[b, h, w, c]).expect("extents are consistent")
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    /// The `N x C` rows of one batch element.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.tokens() * self.channels();
        &self.data.data()[b * n..(b + 1) * n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn layout_round_trip_is_lossless(b in 1usize..3, h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
            let mut rng = crate::Rng::new(seed);
            let g = TokenGrid::new(b, h, w, c, rng.normal_vec(b * h * w * c)).unwrap();
            let back = TokenGrid::from_bhwc(g.to_bhwc()).unwrap();
            prop_assert_eq!(back, g);
        }
    }

    #[test]
    fn sequence_extent_must_match_layout() {
        let t = Tensor::zeros(&[1, 6, 2]);
        assert!(TokenGrid::from_tensor(t.clone(), 2, 3).is_ok());
        assert!(TokenGrid::from_tensor(t, 2, 2).is_err());
    }
}
