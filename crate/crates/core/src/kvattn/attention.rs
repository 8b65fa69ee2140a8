use super::compress::{compress_backward, compress_forward, conv_avg_init, CompressCache, ConvGrads, ConvView, ConvWeights};
use super::{CompressionSpec, TokenGrid};
use crate::error::{bail, Result};
use crate::numerics::ops::{linear, linear_backward, softmax_rows_backward, softmax_rows_inplace};
use crate::numerics::{gemm, MatMut, MatRef, Rng, Tensor};

/// Owned weights of one self-attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    /// `[C, 3C]`; output columns are `[q | k | v]`.
    pub qkv_proj: Tensor,
    /// `[C, C]`.
    pub out_proj: Tensor,
    /// Present iff the layer compresses with the conv operator at `R > 1`.
    pub conv: Option<ConvWeights>,
    pub heads: usize,
}

impl AttentionWeights {
    /// Gaussian projections with std `1/sqrt(C)`; conv weights (when the
    /// spec needs them) use the averaging initialisation.
    pub fn random(channels: usize, heads: usize, spec: &CompressionSpec, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            bail!(Config, "{channels} channels cannot be split into {heads} heads");
        }
        let std = 1.0 / (channels as f64).sqrt();
        Ok(Self {
            qkv_proj: Tensor::randn(&[channels, 3 * channels], std, rng),
            out_proj: Tensor::randn(&[channels, channels], std, rng),
            conv: spec.has_conv_weights().then(|| conv_avg_init(spec.stride, channels, rng)),
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.out_proj.shape()[0]
    }

    pub fn view(&self) -> AttnView<'_> {
        AttnView {
            channels: self.channels(),
            heads: self.heads,
            qkv: self.qkv_proj.data(),
            out: self.out_proj.data(),
            conv: self.conv.as_ref().map(ConvWeights::view),
        }
    }
}

/// Borrowed attention weights, as stored in a parameter store.
#[derive(Clone, Copy, Debug)]
pub struct AttnView<'a> {
    pub channels: usize,
    pub heads: usize,
    pub qkv: &'a [f64],
    pub out: &'a [f64],
    pub conv: Option<ConvView<'a>>,
}

/// Saved state of the scaled dot-product core.
#[derive(Clone, Debug)]
pub struct MhaCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `n x m` attention probabilities.
    probs: Vec<f64>,
    n: usize,
    m: usize,
    c: usize,
    heads: usize,
}

impl MhaCache {
    pub fn score_shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }
}

/// Multi-head scaled dot-product attention of `n` queries over `m`
/// keys/values, all `c` wide and split into `heads` contiguous column blocks.
pub fn mha_forward(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, c: usize, heads: usize) -> (Vec<f64>, MhaCache) {
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut probs = vec![0.0; heads * n * m];
    let mut out = vec![0.0; n * c];
    let (qm, km, vm) = (MatRef::new(q, n, c), MatRef::new(k, m, c), MatRef::new(v, m, c));
    for (h, p) in probs.chunks_exact_mut(n * m).enumerate() {
        let cols = h * dk;
        gemm(scale, qm.cols(cols, dk), km.cols(cols, dk).t(), 0.0, MatMut::new(p, n, m));
        softmax_rows_inplace(p, m);
        gemm(1.0, MatRef::new(p, n, m), vm.cols(cols, dk), 0.0, MatMut::new(&mut out, n, c).cols(cols, dk));
    }
    let cache = MhaCache { q: q.to_vec(), k: k.to_vec(), v: v.to_vec(), probs, n, m, c, heads };
    (out, cache)
}

/// Backward of [`mha_forward`]: `(dq, dk, dv)`.
pub fn mha_backward(cache: &MhaCache, d_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let MhaCache { n, m, c, heads, .. } = *cache;
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let (qm, km, vm) = (MatRef::new(&cache.q, n, c), MatRef::new(&cache.k, m, c), MatRef::new(&cache.v, m, c));
    let dom = MatRef::new(d_out, n, c);
    let mut dq = vec![0.0; n * c];
    let mut dkk = vec![0.0; m * c];
    let mut dv = vec![0.0; m * c];
    let mut dp = vec![0.0; n * m];
    for (h, p) in cache.probs.chunks_exact(n * m).enumerate() {
        let cols = h * dk;
        let pm = MatRef::new(p, n, m);
        gemm(1.0, dom.cols(cols, dk), vm.cols(cols, dk).t(), 0.0, MatMut::new(&mut dp, n, m));
        gemm(1.0, pm.t(), dom.cols(cols, dk), 0.0, MatMut::new(&mut dv, m, c).cols(cols, dk));
        let ds = softmax_rows_backward(p, &dp, m);
        let dsm = MatRef::new(&ds, n, m);
        gemm(scale, dsm, km.cols(cols, dk), 0.0, MatMut::new(&mut dq, n, c).cols(cols, dk));
        gemm(scale, dsm.t(), qm.cols(cols, dk), 0.0, MatMut::new(&mut dkk, m, c).cols(cols, dk));
    }
    (dq, dkk, dv)
}

/// Saved state of one self-attention call on one grid.
#[derive(Clone, Debug)]
pub struct AttnCache {
    x: Vec<f64>,
    o: Vec<f64>,
    k_cache: CompressCache,
    v_cache: CompressCache,
    mha: MhaCache,
}

impl AttnCache {
    /// `(N, N')` of the score matrix that was formed.
    pub fn score_shape(&self) -> (usize, usize) {
        self.mha.score_shape()
    }

    /// Rows fed to the attention block, `N x C`.
    pub fn input(&self) -> &[f64] {
        &self.x
    }

    /// Keys after compression, `N' x C`.
    pub fn compressed_keys(&self) -> &[f64] {
        &self.mha.k
    }
}

#[derive(Clone, Debug)]
pub struct AttnGrads {
    pub qkv: Vec<f64>,
    pub out: Vec<f64>,
    pub conv: Option<ConvGrads>,
}

fn split_qkv(qkv: &[f64], n: usize, c: usize) -> [Vec<f64>; 3] {
    let mut parts = [vec![0.0; n * c], vec![0.0; n * c], vec![0.0; n * c]];
    for (i, row) in qkv.chunks_exact(3 * c).enumerate() {
        for (p, part) in parts.iter_mut().enumerate() {
            part[i * c..(i + 1) * c].copy_from_slice(&row[p * c..(p + 1) * c]);
        }
    }
    parts
}

/// Self-attention with compressed keys/values on one `h x w` grid of
/// `C`-wide tokens (`x` is `h*w x C`, row-major).
pub fn self_attention_forward(
    x: &[f64],
    h: usize,
    w: usize,
    spec: &CompressionSpec,
    p: &AttnView<'_>,
) -> Result<(Vec<f64>, AttnCache)> {
    let c = p.channels;
    let n = h * w;
    if x.len() != n * c {
        bail!(Dimension, "attention input has {} values, expected {n}x{c}", x.len());
    }
    let qkv = linear(x, n, p.qkv, c, 3 * c, None);
    let [q, k, v] = split_qkv(&qkv, n, c);
    let (kc, (ho, wo), k_cache) = compress_forward(&k, h, w, c, spec, p.conv)?;
    let (vc, _, v_cache) = compress_forward(&v, h, w, c, spec, p.conv)?;
    let (o, mha) = mha_forward(&q, &kc, &vc, n, ho * wo, c, p.heads);
    let y = linear(&o, n, p.out, c, c, None);
    Ok((y, AttnCache { x: x.to_vec(), o, k_cache, v_cache, mha }))
}

/// Backward of [`self_attention_forward`].
pub fn self_attention_backward(cache: &AttnCache, p: &AttnView<'_>, dy: &[f64]) -> (Vec<f64>, AttnGrads) {
    let c = p.channels;
    let n = cache.mha.n;
    let mut d_out_w = vec![0.0; c * c];
    let d_o = linear_backward(&cache.o, n, p.out, c, c, dy, &mut d_out_w, None);
    let (dq, dkc, dvc) = mha_backward(&cache.mha, &d_o);
    let (dk, gk) = compress_backward(&cache.k_cache, p.conv, &dkc);
    let (dv, gv) = compress_backward(&cache.v_cache, p.conv, &dvc);
    let mut conv = None;
    ConvGrads::merge(&mut conv, gk);
    ConvGrads::merge(&mut conv, gv);
    let mut dqkv = vec![0.0; n * 3 * c];
    for (i, row) in dqkv.chunks_exact_mut(3 * c).enumerate() {
        row[..c].copy_from_slice(&dq[i * c..(i + 1) * c]);
        row[c..2 * c].copy_from_slice(&dk[i * c..(i + 1) * c]);
        row[2 * c..].copy_from_slice(&dv[i * c..(i + 1) * c]);
    }
    let mut d_qkv_w = vec![0.0; c * 3 * c];
    let dx = linear_backward(&cache.x, n, p.qkv, c, 3 * c, &dqkv, &mut d_qkv_w, None);
    (dx, AttnGrads { qkv: d_qkv_w, out: d_out_w, conv })
}

/// KV-compressed multi-head self-attention over a batch of grids. Output
/// has the input's layout.
pub fn kv_compressed_attention(x: &TokenGrid, spec: &CompressionSpec, weights: &AttentionWeights) -> Result<TokenGrid> {
    if x.channels() != weights.channels() {
        bail!(Dimension, "grid has {} channels, weights expect {}", x.channels(), weights.channels());
    }
    let view = weights.view();
    let mut out = Vec::with_capacity(x.data().len());
    for b in 0..x.batch() {
        let (y, _) = self_attention_forward(x.sample(b), x.height(), x.width(), spec, &view)?;
        out.extend(y);
    }
    TokenGrid::new(x.batch(), x.height(), x.width(), x.channels(), out)
}

/// Uncompressed multi-head self-attention.
pub fn dense_attention(x: &TokenGrid, weights: &AttentionWeights) -> Result<TokenGrid> {
    kv_compressed_attention(x, &CompressionSpec::none(), weights)
}
