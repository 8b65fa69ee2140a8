//! Procedural image datasets with discrete condition labels.
//!
//! Every image is a function of normalised pixel coordinates, so the same
//! sample can be rendered at any resolution. Each sample is described by
//! four discrete attributes in `0..4`; attribute `j` with value `a` becomes
//! label `4 * j + a`, so labels live in `0..16`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::numerics::{Rng, Stream, Tensor};

pub const LABELS_PER_SAMPLE: usize = 4;
pub const LABEL_VOCAB: usize = 16;

const PALETTE: [[f64; 3]; 4] = [[0.9, -0.6, -0.6], [-0.6, 0.8, -0.4], [-0.5, -0.3, 0.9], [0.8, 0.7, -0.7]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianBlobs,
    StripedPatterns,
    Checker,
}

impl Generator {
    pub const ALL: [Generator; 3] = [Generator::GaussianBlobs, Generator::StripedPatterns, Generator::Checker];

    pub fn as_str(self) -> &'static str {
        match self {
            Generator::GaussianBlobs => "gaussian_blobs",
            Generator::StripedPatterns => "striped_patterns",
            Generator::Checker => "checker",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" => Ok(Generator::GaussianBlobs),
            "striped_patterns" => Ok(Generator::StripedPatterns),
            "checker" => Ok(Generator::Checker),
            _ => Err(Error::Config(format!("unknown generator {s:?}"))),
        }
    }
}

/// Attributes and continuous jitter of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Params {
    attrs: [usize; 4],
    jitter: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub generator: Generator,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub count: usize,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn new(generator: Generator, height: usize, width: usize, channels: usize, count: usize, seed: u64) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || count == 0 {
            bail!(Config, "dataset extents and count must be positive");
        }
        Ok(Self { generator, height, width, channels, count, seed })
    }

    /// Same samples rendered at another resolution.
    pub fn at_resolution(&self, height: usize, width: usize) -> Self {
        Self { height, width, ..self.clone() }
    }

    fn params(&self, index: usize) -> Params {
        let mut rng = Rng::derive(self.seed, Stream::Data, 1 << 32 | index as u64);
        let attrs = [rng.below(4), rng.below(4), rng.below(4), rng.below(4)];
        Params { attrs, jitter: [rng.uniform(), rng.uniform()] }
    }

    pub fn labels(&self, index: usize) -> [usize; LABELS_PER_SAMPLE] {
        let a = self.params(index).attrs;
        [a[0], 4 + a[1], 8 + a[2], 12 + a[3]]
    }

    /// Sample `index` as `H x W x C` values in `[-1, 1]`.
    pub fn image(&self, index: usize) -> Vec<f64> {
        let p = self.params(index);
        let color = PALETTE[p.attrs[3]];
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64;
                let v = (y as f64 + 0.5) / h as f64;
                let mask = self.mask(&p, u, v);
                for ch in 0..c {
                    let fg = color[ch % 3];
                    let bg = -0.8 + 0.1 * (ch % 3) as f64;
                    out.push(bg + (fg - bg) * mask);
                }
            }
        }
        out
    }

    /// Foreground weight in `[0, 1]` at normalised coordinates `(u, v)`.
    fn mask(&self, p: &Params, u: f64, v: f64) -> f64 {
        let [a0, a1, a2, _] = p.attrs;
        match self.generator {
            Generator::GaussianBlobs => {
                let cx = (a0 as f64 + 0.25 + 0.5 * p.jitter[0]) / 4.0;
                let cy = (a1 as f64 + 0.25 + 0.5 * p.jitter[1]) / 4.0;
                let sigma = 0.08 + 0.05 * a2 as f64;
                let r2 = (u - cx).powi(2) + (v - cy).powi(2);
                (-r2 / (2.0 * sigma * sigma)).exp()
            }
            Generator::StripedPatterns => {
                let angle = std::f64::consts::PI * a0 as f64 / 4.0;
                let freq = (a1 + 1) as f64;
                let phase = (a2 as f64 + p.jitter[0]) / 4.0;
                let s = u * angle.cos() + v * angle.sin();
                0.5 + 0.5 * (2.0 * std::f64::consts::PI * (freq * s + phase)).sin()
            }
            Generator::Checker => {
                let cells = (a0 + 2) as f64;
                let ox = (a1 as f64 + p.jitter[0]) / (4.0 * cells);
                let oy = (a2 as f64 + p.jitter[1]) / (4.0 * cells);
                let i = ((u + ox) * cells).floor() as i64;
                let j = ((v + oy) * cells).floor() as i64;
                ((i + j).rem_euclid(2)) as f64
            }
        }
    }

    /// Images `[B, H, W, C]` and flattened labels for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width * self.channels);
        let mut labels = Vec::with_capacity(indices.len() * LABELS_PER_SAMPLE);
        for &i in indices {
            if i >= self.count {
                bail!(Config, "sample {i} out of range for a dataset of {}", self.count);
            }
            data.extend(self.image(i));
            labels.extend(self.labels(i));
        }
        let t = Tensor::new(&[indices.len(), self.height, self.width, self.channels], data)?;
        Ok((t, labels))
    }

    /// Indices for training step `step`, drawn with replacement from the
    /// data stream of `order_seed`. Depends only on `(order_seed, step)`.
    pub fn step_indices(&self, order_seed: u64, step: usize, batch: usize) -> Vec<usize> {
        let mut rng = Rng::derive(order_seed, Stream::Data, step as u64);
        (0..batch).map(|_| rng.below(self.count)).collect()
    }
}
