use crate::kvattn::CompressionOp;
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug)]
struct View {
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols, cs: 1 }
    }

    fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self, len: usize) {
        if self.rows > 0 && self.cols > 0 {
            assert!((self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len, "f32 view out of bounds");
        }
    }
}

/// `c = alpha * a * b + beta * c` in f32.
#[allow(clippy::too_many_arguments)]
fn sgemm(alpha: f32, a: &[f32], av: View, b: &[f32], bv: View, beta: f32, c: &mut [f32], cv: View) {
    assert!(av.cols == bv.rows && av.rows == cv.rows && bv.cols == cv.cols);
    av.check(a.len());
    bv.check(b.len());
    cv.check(c.len());
    // SAFETY: every view was bounds-checked against its slice above and `c`
    // is a unique borrow.
    unsafe {
        matrixmultiply::sgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Weights of the timed kernel.
#[derive(Clone, Debug)]
pub struct F32Weights {
    pub channels: usize,
    pub qkv: Vec<f32>,
    pub out: Vec<f32>,
    pub conv_kernel: Vec<f32>,
    pub conv_bias: Vec<f32>,
    pub norm_gain: Vec<f32>,
    pub norm_bias: Vec<f32>,
}

impl F32Weights {
    pub fn random(c: usize, stride: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        let mut g = |n: usize, s: f64| (0..n).map(|_| (s * rng.normal()) as f32).collect::<Vec<f32>>();
        Self {
            channels: c,
            qkv: g(3 * c * c, std),
            out: g(c * c, std),
            conv_kernel: vec![1.0 / (stride * stride) as f32; c * stride * stride],
            conv_bias: vec![0.0; c],
            norm_gain: vec![1.0; c],
            norm_bias: vec![0.0; c],
        }
    }
}

/// Compresses column block `col..col + c` of the row-stride-`rs` token
/// matrix `src` into a contiguous `N' x C` buffer.
#[allow(clippy::too_many_arguments)]
fn compress_f32(src: &[f32], rs: usize, col: usize, h: usize, w: usize, c: usize, r: usize, op: CompressionOp, wts: &F32Weights) -> Vec<f32> {
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![0.0f32; ho * wo * c];
    let at = |y: usize, x: usize| (y * w + x) * rs + col;
    if r == 1 || op == CompressionOp::None {
        let mut out = vec![0.0f32; h * w * c];
        for t in 0..h * w {
            out[t * c..(t + 1) * c].copy_from_slice(&src[t * rs + col..t * rs + col + c]);
        }
        return out;
    }
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            match op {
                CompressionOp::Discard => dst.copy_from_slice(&src[at(oy * r, ox * r)..at(oy * r, ox * r) + c]),
                CompressionOp::Pool | CompressionOp::Conv => {
                    for ky in 0..r {
                        for kx in 0..r {
                            let s = &src[at(oy * r + ky, ox * r + kx)..at(oy * r + ky, ox * r + kx) + c];
                            if op == CompressionOp::Pool {
                                dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
                            } else {
                                for ch in 0..c {
                                    dst[ch] += wts.conv_kernel[(ch * r + ky) * r + kx] * s[ch];
                                }
                            }
                        }
                    }
                    if op == CompressionOp::Pool {
                        let inv = 1.0 / (r * r) as f32;
                        dst.iter_mut().for_each(|d| *d *= inv);
                    } else {
                        dst.iter_mut().zip(&wts.conv_bias).for_each(|(d, b)| *d += b);
                        let mean = dst.iter().sum::<f32>() / c as f32;
                        let var = dst.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
                        let inv = 1.0 / (var + 1e-6).sqrt();
                        for ch in 0..c {
                            dst[ch] = (dst[ch] - mean) * inv * wts.norm_gain[ch] + wts.norm_bias[ch];
                        }
                    }
                }
                CompressionOp::None => unreachable!(),
            }
        }
    }
    out
}

/// Key/value tokens per score tile. Scores are produced one fixed-size tile
/// at a time with an online softmax, so the working set per tile does not
/// depend on N or R.
pub const KEY_BLOCK: usize = 256;

/// Full attention forward on one `h x w x C` sample in f32, processing
/// `chunk` query rows at a time against [`KEY_BLOCK`] keys at a time.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward_f32(
    x: &[f32],
    h: usize,
    w: usize,
    heads: usize,
    stride: usize,
    op: CompressionOp,
    wts: &F32Weights,
    chunk: usize,
) -> Vec<f32> {
    attention_tiled(x, h, w, heads, stride, op, wts, chunk, KEY_BLOCK)
}

#[allow(clippy::too_many_arguments)]
fn attention_tiled(
    x: &[f32],
    h: usize,
    w: usize,
    heads: usize,
    stride: usize,
    op: CompressionOp,
    wts: &F32Weights,
    chunk: usize,
    key_block: usize,
) -> Vec<f32> {
    let c = wts.channels;
    let n = h * w;
    assert_eq!(x.len(), n * c);
    let dk = c / heads;
    let mut qkv = vec![0.0f32; n * 3 * c];
    sgemm(1.0, x, View::row_major(n, c), &wts.qkv, View::row_major(c, 3 * c), 0.0, &mut qkv, View::row_major(n, 3 * c));
    let r = if op == CompressionOp::None { 1 } else { stride };
    let kc = compress_f32(&qkv, 3 * c, c, h, w, c, r, op, wts);
    let vc = compress_f32(&qkv, 3 * c, 2 * c, h, w, c, r, op, wts);
    let m = kc.len() / c;
    let scale = 1.0 / (dk as f32).sqrt();
    let chunk = chunk.clamp(1, n);
    let kb = key_block.clamp(1, m);
    let mut scores = vec![0.0f32; chunk * kb];
    let mut acc = vec![0.0f32; chunk * dk];
    let mut row_max = vec![0.0f32; chunk];
    let mut row_sum = vec![0.0f32; chunk];
    let mut o = vec![0.0f32; n * c];
    for hd in 0..heads {
        let col = hd * dk;
        let mut i0 = 0;
        while i0 < n {
            let rows = chunk.min(n - i0);
            acc[..rows * dk].fill(0.0);
            row_max[..rows].fill(f32::NEG_INFINITY);
            row_sum[..rows].fill(0.0);
            let qv = View { rows, cols: dk, rs: 3 * c, cs: 1 };
            let mut j0 = 0;
            while j0 < m {
                let cols = kb.min(m - j0);
                let s = &mut scores[..rows * cols];
                let kv = View { rows: cols, cols: dk, rs: c, cs: 1 }.t();
                sgemm(scale, &qkv[i0 * 3 * c + col..], qv, &kc[j0 * c + col..], kv, 0.0, s, View::row_major(rows, cols));
                for (i, row) in s.chunks_exact_mut(cols).enumerate() {
                    let mx = row.iter().fold(row_max[i], |a, &b| a.max(b));
                    let corr = (row_max[i] - mx).exp();
                    let mut sum = 0.0f32;
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        sum += *v;
                    }
                    row_sum[i] = row_sum[i] * corr + sum;
                    row_max[i] = mx;
                    acc[i * dk..(i + 1) * dk].iter_mut().for_each(|a| *a *= corr);
                }
                let vv = View { rows: cols, cols: dk, rs: c, cs: 1 };
                sgemm(1.0, s, View::row_major(rows, cols), &vc[j0 * c + col..], vv, 1.0, &mut acc, View::row_major(rows, dk));
                j0 += cols;
            }
            for i in 0..rows {
                let inv = 1.0 / row_sum[i];
                let dst = &mut o[(i0 + i) * c + col..(i0 + i) * c + col + dk];
                dst.iter_mut().zip(&acc[i * dk..(i + 1) * dk]).for_each(|(d, a)| *d = a * inv);
            }
            i0 += rows;
        }
    }
    let mut y = vec![0.0f32; n * c];
    sgemm(1.0, &o, View::row_major(n, c), &wts.out, View::row_major(c, c), 0.0, &mut y, View::row_major(n, c));
    y
}
