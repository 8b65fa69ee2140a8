//! Forward/backward kernel pairs.
//!
//! Slice-level kernels work on row-major buffers and are what the layers
//! call; the `Tensor`-level wrappers check shapes and are the public face.

use super::gemm::{gemm, MatMut, MatRef};
use super::Tensor;
use crate::error::{bail, Result};
use crate::kvattn::TokenGrid;

pub const LAYERNORM_EPS: f64 = 1e-6;

fn ensure_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => bail!(Dimension, "{what} must be 2-D, got shape {s:?}"),
    }
}

/// Plain 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = ensure_2d(a, "matmul lhs")?;
    let (k2, n) = ensure_2d(b, "matmul rhs")?;
    if k != k2 {
        bail!(
            Dimension,
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
    }
    a.ensure_finite("matmul lhs")?;
    b.ensure_finite("matmul rhs")?;
    let mut out = vec![0.0; m * n];
    gemm(1.0, MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), 0.0, MatMut::new(&mut out, m, n));
    Tensor::new(&[m, n], out)
}

/// Gradients of `a * b` with respect to both inputs given the upstream
/// gradient.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = ensure_2d(a, "matmul lhs")?;
    let (_, n) = ensure_2d(b, "matmul rhs")?;
    if grad_out.shape() != [m, n] {
        bail!(Dimension, "upstream gradient {:?} does not match output [{m}, {n}]", grad_out.shape());
    }
    let g = MatRef::new(grad_out.data(), m, n);
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    gemm(1.0, g, MatRef::new(b.data(), k, n).t(), 0.0, MatMut::new(&mut ga, m, k));
    gemm(1.0, MatRef::new(a.data(), m, k).t(), g, 0.0, MatMut::new(&mut gb, k, n));
    Ok((Tensor::new(&[m, k], ga)?, Tensor::new(&[k, n], gb)?))
}

/// `x (rows x d_in) * w (d_in x d_out) + bias`.
pub fn linear(x: &[f64], rows: usize, w: &[f64], d_in: usize, d_out: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; rows * d_out];
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(d_out) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(1.0, MatRef::new(x, rows, d_in), MatRef::new(w, d_in, d_out), beta, MatMut::new(&mut y, rows, d_out));
    y
}

/// Backward of [`linear`]. Accumulates into `dw`/`db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    w: &[f64],
    d_in: usize,
    d_out: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    let g = MatRef::new(dy, rows, d_out);
    gemm(1.0, MatRef::new(x, rows, d_in).t(), g, 1.0, MatMut::new(dw, d_in, d_out));
    if let Some(db) = db {
        for row in dy.chunks_exact(d_out) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    let mut dx = vec![0.0; rows * d_in];
    gemm(1.0, g, MatRef::new(w, d_in, d_out).t(), 0.0, MatMut::new(&mut dx, rows, d_in));
    dx
}

/// Numerically stable softmax over each row of length `cols`, in place.
pub fn softmax_rows_inplace(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Given probabilities `p` and upstream `dp`, returns the gradient with
/// respect to the logits: `p * (dp - <dp, p>)` row by row.
pub fn softmax_rows_backward(p: &[f64], dp: &[f64], cols: usize) -> Vec<f64> {
    let mut ds = vec![0.0; p.len()];
    for ((pr, dr), sr) in p.chunks_exact(cols).zip(dp.chunks_exact(cols)).zip(ds.chunks_exact_mut(cols)) {
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((s, &pv), &dv) in sr.iter_mut().zip(pr).zip(dr) {
            *s = pv * (dv - dot);
        }
    }
    ds
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("softmax input")?;
    let cols = *x.shape().last().expect("tensor has at least one axis");
    let mut out = x.data().to_vec();
    softmax_rows_inplace(&mut out, cols);
    Tensor::new(x.shape(), out)
}

/// Saved state of a row-wise layer norm.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub cols: usize,
}

/// Normalises each row to zero mean and unit variance, then applies
/// `gain`/`bias` (both optional: absent means 1 and 0).
pub fn layernorm_rows(
    x: &[f64],
    cols: usize,
    gain: Option<&[f64]>,
    bias: Option<&[f64]>,
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..cols {
            let h = (xr[j] - mean) * is;
            xhat[r * cols + j] = h;
            let g = gain.map_or(1.0, |g| g[j]);
            let b = bias.map_or(0.0, |b| b[j]);
            y[r * cols + j] = h * g + b;
        }
    }
    (y, LayerNormCache { xhat, inv_std, cols })
}

/// Backward of [`layernorm_rows`]; accumulates into `dgain`/`dbias` when
/// given and returns the input gradient.
pub fn layernorm_rows_backward(
    cache: &LayerNormCache,
    gain: Option<&[f64]>,
    dy: &[f64],
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let cols = cache.cols;
    let n = cols as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; cols];
    for (r, &is) in cache.inv_std.iter().enumerate() {
        let xh = &cache.xhat[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dxhat[j] = dyr[j] * gain.map_or(1.0, |g| g[j]);
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..cols {
                dg[j] += dyr[j] * xh[j];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..cols {
                db[j] += dyr[j];
            }
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        for j in 0..cols {
            dx[r * cols + j] = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

/// Layer norm over the last axis of `x`.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = *x.shape().last().expect("tensor has at least one axis");
    if gain.len() != c || bias.len() != c {
        bail!(
            Dimension,
            "layernorm channel extent {c} but gain {:?} / bias {:?}",
            gain.shape(),
            bias.shape()
        );
    }
    x.ensure_finite("layernorm input")?;
    let (y, _) = layernorm_rows(x.data(), c, Some(gain.data()), Some(bias.data()), eps);
    Tensor::new(x.shape(), y)
}

/// Depthwise (group count = channels) `stride x stride` convolution with
/// stride equal to the kernel side, on one `h x w x c` grid.
///
/// `kernel` is laid out `[c][ky][kx]`.
pub fn group_conv2d(x: &[f64], h: usize, w: usize, c: usize, kernel: &[f64], bias: &[f64], stride: usize) -> Vec<f64> {
    let (ho, wo) = (h / stride, w / stride);
    let ss = stride * stride;
    let mut out = vec![0.0; ho * wo * c];
    for i in 0..ho {
        for j in 0..wo {
            let o = &mut out[(i * wo + j) * c..(i * wo + j + 1) * c];
            o.copy_from_slice(bias);
            for a in 0..stride {
                for b in 0..stride {
                    let src = &x[((i * stride + a) * w + j * stride + b) * c..][..c];
                    for ch in 0..c {
                        o[ch] += kernel[ch * ss + a * stride + b] * src[ch];
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`group_conv2d`]: returns `(dx, dkernel, dbias)`.
pub fn group_conv2d_backward(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kernel: &[f64],
    stride: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = (h / stride, w / stride);
    let ss = stride * stride;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; c];
    for i in 0..ho {
        for j in 0..wo {
            let g = &dy[(i * wo + j) * c..][..c];
            db.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            for a in 0..stride {
                for b in 0..stride {
                    let base = ((i * stride + a) * w + j * stride + b) * c;
                    for ch in 0..c {
                        let k = ch * ss + a * stride + b;
                        dx[base + ch] += kernel[k] * g[ch];
                        dk[k] += x[base + ch] * g[ch];
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Per-channel strided convolution over a token grid.
pub fn strided_group_conv2d(x: &TokenGrid, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<TokenGrid> {
    let c = x.channels();
    if stride == 0 {
        bail!(Config, "stride must be positive");
    }
    if kernel.shape() != [c, stride, stride] {
        bail!(
            Dimension,
            "kernel must be [{c}, {stride}, {stride}], got {:?}",
            kernel.shape()
        );
    }
    if bias.len() != c {
        bail!(Dimension, "bias must have {c} entries, got {:?}", bias.shape());
    }
    let (h, w) = (x.height(), x.width());
    if h % stride != 0 || w % stride != 0 {
        bail!(Layout, "grid {h}x{w} is not divisible by stride {stride}");
    }
    let n = h * w * c;
    let mut out = Vec::with_capacity(x.batch() * n / (stride * stride));
    for sample in x.data().chunks_exact(n) {
        out.extend(group_conv2d(sample, h, w, c, kernel.data(), bias.data(), stride));
    }
    TokenGrid::new(x.batch(), h / stride, w / stride, c, out)
}

/// Align-corners bilinear resize of an `hs x ws x c` grid.
///
/// Returns an exact copy when the target equals the source.
pub fn bilinear_resize_grid(grid: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (hs, ws, c) = match *grid.shape() {
        [h, w, c] => (h, w, c),
        ref s => bail!(Dimension, "grid must be [H, W, C], got {s:?}"),
    };
    let (ht, wt) = target;
    if ht == 0 || wt == 0 {
        bail!(Dimension, "zero target extent {ht}x{wt}");
    }
    if (ht, wt) == (hs, ws) {
        return Tensor::new(grid.shape(), grid.data().to_vec());
    }
    let src = grid.data();
    let coord = |i: usize, t: usize, s: usize| -> (usize, usize, f64) {
        if t == 1 || s == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (s - 1) as f64 / (t - 1) as f64;
        let lo = (pos.floor() as usize).min(s - 1);
        let hi = (lo + 1).min(s - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = vec![0.0; ht * wt * c];
    for i in 0..ht {
        let (y0, y1, fy) = coord(i, ht, hs);
        for j in 0..wt {
            let (x0, x1, fx) = coord(j, wt, ws);
            let o = &mut out[(i * wt + j) * c..][..c];
            for (ch, v) in o.iter_mut().enumerate() {
                let at = |y: usize, x: usize| src[(y * ws + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                *v = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[ht, wt, c], out)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}
