use nalgebra::DMatrix;

use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Invertible per-pixel channel map `y = M x + s`, standing in for a latent
/// autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCodec {
    id: String,
    channels: usize,
    matrix: Vec<f64>,
    shift: Vec<f64>,
    inverse: Vec<f64>,
}

impl LinearCodec {
    /// `matrix` is row-major `C x C`. Singular or badly conditioned maps
    /// are rejected.
    pub fn new(id: impl Into<String>, matrix: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        let c = shift.len();
        if c == 0 || matrix.len() != c * c {
            bail!(Config, "codec needs a {c}x{c} matrix, got {} entries", matrix.len());
        }
        let m = DMatrix::from_row_slice(c, c, &matrix);
        let svd = m.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-8 * smax.max(1e-300)) {
            bail!(Config, "codec matrix is not invertible (singular values {smin:e} .. {smax:e})");
        }
        let Some(inv) = m.try_inverse() else {
            bail!(Config, "codec matrix is not invertible");
        };
        let inverse = (0..c).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| inv[(i, j)]).collect();
        Ok(Self { id: id.into(), channels: c, matrix, shift, inverse })
    }

    pub fn identity(channels: usize) -> Self {
        let m = (0..channels * channels).map(|k| if k / channels == k % channels { 1.0 } else { 0.0 }).collect();
        Self::new("identity", m, vec![0.0; channels]).expect("identity is invertible")
    }

    /// Output channel `i` is input channel `perm[i]`.
    pub fn permutation(perm: &[usize]) -> Result<Self> {
        let c = perm.len();
        let mut seen = vec![false; c];
        for &p in perm {
            if p >= c || std::mem::replace(&mut seen[p], true) {
                bail!(Config, "{perm:?} is not a permutation");
            }
        }
        let mut m = vec![0.0; c * c];
        for (i, &p) in perm.iter().enumerate() {
            m[i * c + p] = 1.0;
        }
        let id = format!("perm{}", perm.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(""));
        Self::new(id, m, vec![0.0; c])
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn apply(&self, x: &Tensor, m: &[f64], pre_shift: f64, post_shift: f64) -> Result<Tensor> {
        let c = self.channels;
        if x.shape().last() != Some(&c) {
            bail!(Dimension, "codec over {c} channels applied to {:?}", x.shape());
        }
        let mut out = vec![0.0; x.len()];
        let mut tmp = vec![0.0; c];
        for (src, dst) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            for j in 0..c {
                tmp[j] = src[j] + pre_shift * self.shift[j];
            }
            for i in 0..c {
                let row = &m[i * c..(i + 1) * c];
                dst[i] = row.iter().zip(&tmp).map(|(a, b)| a * b).sum::<f64>() + post_shift * self.shift[i];
            }
        }
        Tensor::new(x.shape(), out)
    }

    /// Pixels to latents.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, &self.matrix, 0.0, 1.0)
    }

    /// Latents to pixels.
    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        self.apply(y, &self.inverse, -1.0, 0.0)
    }
}
