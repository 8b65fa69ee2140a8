use super::{AttentionWeights, CompressionOp, CompressionSpec, PadMode, PoolMode, TokenGrid};
use crate::error::{bail, Result};
use crate::numerics::ops::{
    group_conv2d, group_conv2d_backward, layernorm_rows, layernorm_rows_backward, LayerNormCache, LAYERNORM_EPS,
};
use crate::numerics::{Rng, Tensor};

/// Learnable weights of the conv operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    /// `[C, R, R]`, one kernel per channel.
    pub kernel: Tensor,
    pub bias: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

impl ConvWeights {
    pub fn view(&self) -> ConvView<'_> {
        ConvView {
            kernel: self.kernel.data(),
            bias: self.bias.data(),
            norm_gain: self.norm_gain.data(),
            norm_bias: self.norm_bias.data(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len() + self.norm_gain.len() + self.norm_bias.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvView<'a> {
    pub kernel: &'a [f64],
    pub bias: &'a [f64],
    pub norm_gain: &'a [f64],
    pub norm_bias: &'a [f64],
}

#[derive(Clone, Debug, Default)]
pub struct ConvGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
}

impl ConvGrads {
    fn add(&mut self, other: ConvGrads) {
        if self.kernel.is_empty() {
            *self = other;
            return;
        }
        for (a, b) in [
            (&mut self.kernel, other.kernel),
            (&mut self.bias, other.bias),
            (&mut self.norm_gain, other.norm_gain),
            (&mut self.norm_bias, other.norm_bias),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub(crate) fn merge(into: &mut Option<ConvGrads>, other: Option<ConvGrads>) {
        if let Some(o) = other {
            into.get_or_insert_with(ConvGrads::default).add(o);
        }
    }
}

/// Averaging initialisation of the conv operator: every kernel weight
/// `1/R^2`, zero bias, unit norm gain, zero norm bias. Before the norm the
/// operator is then exactly `R x R` mean pooling.
///
/// `rng` is unused; it keeps the signature in line with random initialisers.
pub fn conv_avg_init(stride: usize, channels: usize, _rng: &mut Rng) -> ConvWeights {
    let w = 1.0 / (stride * stride) as f64;
    ConvWeights {
        kernel: Tensor::full(&[channels, stride, stride], w),
        bias: Tensor::zeros(&[channels]),
        norm_gain: Tensor::full(&[channels], 1.0),
        norm_bias: Tensor::zeros(&[channels]),
    }
}

/// What the backward pass needs from one compression call.
#[derive(Clone, Debug)]
pub struct CompressCache {
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    c: usize,
    stride: usize,
    kind: Kind,
}

#[derive(Clone, Debug)]
enum Kind {
    Identity,
    Subsample,
    Mean,
    Conv { padded: Vec<f64>, norm: LayerNormCache },
}

fn edge_pad(x: &[f64], h: usize, w: usize, c: usize, hp: usize, wp: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(hp * wp * c);
    for i in 0..hp {
        let si = i.min(h - 1);
        for j in 0..wp {
            let sj = j.min(w - 1);
            out.extend_from_slice(&x[(si * w + sj) * c..][..c]);
        }
    }
    out
}

fn edge_unpad(dp: &[f64], h: usize, w: usize, c: usize, hp: usize, wp: usize) -> Vec<f64> {
    let mut dx = vec![0.0; h * w * c];
    for i in 0..hp {
        let si = i.min(h - 1);
        for j in 0..wp {
            let sj = j.min(w - 1);
            let src = &dp[(i * wp + j) * c..][..c];
            let dst = &mut dx[(si * w + sj) * c..][..c];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }
    dx
}

/// Compresses one `h x w x c` token grid. Returns the compressed rows, the
/// compressed grid extents and a cache for [`compress_backward`].
pub fn compress_forward(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    spec: &CompressionSpec,
    conv: Option<ConvView<'_>>,
) -> Result<(Vec<f64>, (usize, usize), CompressCache)> {
    let (ho, wo) = spec.output_grid(h, w)?;
    let r = spec.stride;
    let mut cache = CompressCache { h, w, hp: h, wp: w, c, stride: r, kind: Kind::Identity };
    if spec.is_identity() {
        return Ok((x.to_vec(), (h, w), cache));
    }
    let (hp, wp) = (ho * r, wo * r);
    cache.hp = hp;
    cache.wp = wp;
    let padded;
    let src: &[f64] = if (hp, wp) != (h, w) {
        debug_assert_eq!(spec.pad, PadMode::Edge);
        padded = edge_pad(x, h, w, c, hp, wp);
        &padded
    } else {
        x
    };

    let mut out = vec![0.0; ho * wo * c];
    match (spec.op, spec.pool_mode) {
        (CompressionOp::Discard, _) | (CompressionOp::Pool, PoolMode::Nearest) => {
            for i in 0..ho {
                for j in 0..wo {
                    out[(i * wo + j) * c..][..c].copy_from_slice(&src[((i * r) * wp + j * r) * c..][..c]);
                }
            }
            cache.kind = Kind::Subsample;
        }
        (CompressionOp::Pool, PoolMode::Mean) => {
            let inv = 1.0 / (r * r) as f64;
            for i in 0..ho {
                for j in 0..wo {
                    let o = &mut out[(i * wo + j) * c..][..c];
                    for a in 0..r {
                        for b in 0..r {
                            let s = &src[((i * r + a) * wp + j * r + b) * c..][..c];
                            o.iter_mut().zip(s).for_each(|(p, q)| *p += q);
                        }
                    }
                    o.iter_mut().for_each(|v| *v *= inv);
                }
            }
            cache.kind = Kind::Mean;
        }
        (CompressionOp::Conv, _) => {
            let Some(cv) = conv else {
                bail!(Config, "conv compression needs conv/norm weights");
            };
            if cv.kernel.len() != c * r * r || cv.bias.len() != c || cv.norm_gain.len() != c || cv.norm_bias.len() != c {
                bail!(Dimension, "conv weights do not match {c} channels at stride {r}");
            }
            let pre = group_conv2d(src, hp, wp, c, cv.kernel, cv.bias, r);
            let (y, norm) = layernorm_rows(&pre, c, Some(cv.norm_gain), Some(cv.norm_bias), LAYERNORM_EPS);
            out = y;
            cache.kind = Kind::Conv { padded: src.to_vec(), norm };
        }
        (CompressionOp::None, _) => unreachable!("handled by is_identity"),
    }
    Ok((out, (ho, wo), cache))
}

/// Backward of [`compress_forward`]: input gradient plus conv gradients for
/// the conv operator.
pub fn compress_backward(cache: &CompressCache, conv: Option<ConvView<'_>>, dy: &[f64]) -> (Vec<f64>, Option<ConvGrads>) {
    let CompressCache { h, w, hp, wp, c, stride: r, .. } = *cache;
    let (ho, wo) = (hp / r.max(1), wp / r.max(1));
    let mut grads = None;
    let dpad = match &cache.kind {
        Kind::Identity => return (dy.to_vec(), None),
        Kind::Subsample => {
            let mut d = vec![0.0; hp * wp * c];
            for i in 0..ho {
                for j in 0..wo {
                    d[((i * r) * wp + j * r) * c..][..c].copy_from_slice(&dy[(i * wo + j) * c..][..c]);
                }
            }
            d
        }
        Kind::Mean => {
            let inv = 1.0 / (r * r) as f64;
            let mut d = vec![0.0; hp * wp * c];
            for i in 0..ho {
                for j in 0..wo {
                    let g = &dy[(i * wo + j) * c..][..c];
                    for a in 0..r {
                        for b in 0..r {
                            let t = &mut d[((i * r + a) * wp + j * r + b) * c..][..c];
                            t.iter_mut().zip(g).for_each(|(p, q)| *p = q * inv);
                        }
                    }
                }
            }
            d
        }
        Kind::Conv { padded, norm } => {
            let cv = conv.expect("conv weights present in forward");
            let mut g = ConvGrads {
                norm_gain: vec![0.0; c],
                norm_bias: vec![0.0; c],
                ..Default::default()
            };
            let dpre = layernorm_rows_backward(norm, Some(cv.norm_gain), dy, Some(&mut g.norm_gain), Some(&mut g.norm_bias));
            let (dx, dk, db) = group_conv2d_backward(padded, hp, wp, c, cv.kernel, r, &dpre);
            g.kernel = dk;
            g.bias = db;
            grads = Some(g);
            dx
        }
    };
    let dx = if (hp, wp) != (h, w) { edge_unpad(&dpad, h, w, c, hp, wp) } else { dpad };
    (dx, grads)
}

/// Applies `f_c` to every grid in the batch.
pub fn compress_tokens(x: &TokenGrid, spec: &CompressionSpec, weights: &AttentionWeights) -> Result<TokenGrid> {
    let conv = weights.conv.as_ref().map(ConvWeights::view);
    if spec.has_conv_weights() && conv.is_none() {
        bail!(Config, "conv compression needs conv/norm weights");
    }
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let (ho, wo) = spec.output_grid(h, w)?;
    let mut out = Vec::with_capacity(x.batch() * ho * wo * c);
    for b in 0..x.batch() {
        let (y, _, _) = compress_forward(x.sample(b), h, w, c, spec, conv)?;
        out.extend(y);
    }
    TokenGrid::new(x.batch(), ho, wo, c, out)
}
