//! Straight-line reimplementation of compressed attention with explicit
//! loops, used as an oracle for the library kernels.

use kvdit::kvattn::{
    compress_tokens, conv_avg_init, dense_attention, kv_compressed_attention, AttentionWeights, ConvWeights,
    PoolMode,
};
use kvdit::numerics::{check_gradients, GradCheckOptions};
use kvdit::{CompressionOp, CompressionSpec, Rng, Tensor, TokenGrid};

struct Oracle<'a> {
    c: usize,
    heads: usize,
    wqkv: &'a [f64],
    wout: &'a [f64],
    conv: Option<&'a ConvWeights>,
}

impl Oracle<'_> {
    fn compress(&self, t: &[Vec<f64>], h: usize, w: usize, op: CompressionOp, r: usize, mode: PoolMode) -> Vec<Vec<f64>> {
        if op == CompressionOp::None || r == 1 {
            return t.to_vec();
        }
        let c = self.c;
        let mut out = Vec::new();
        for i in 0..h / r {
            for j in 0..w / r {
                let mut tok = vec![0.0; c];
                for ch in 0..c {
                    tok[ch] = match (op, mode) {
                        (CompressionOp::Discard, _) | (CompressionOp::Pool, PoolMode::Nearest) => t[(i * r) * w + j * r][ch],
                        (CompressionOp::Pool, PoolMode::Mean) => {
                            let mut s = 0.0;
                            for a in 0..r {
                                for b in 0..r {
                                    s += t[(i * r + a) * w + j * r + b][ch];
                                }
                            }
                            s / (r * r) as f64
                        }
                        (CompressionOp::Conv, _) => {
                            let cw = self.conv.unwrap();
                            let mut s = cw.bias.data()[ch];
                            for a in 0..r {
                                for b in 0..r {
                                    s += cw.kernel.data()[ch * r * r + a * r + b] * t[(i * r + a) * w + j * r + b][ch];
                                }
                            }
                            s
                        }
                        _ => unreachable!(),
                    };
                }
                if op == CompressionOp::Conv {
                    let cw = self.conv.unwrap();
                    let mean = tok.iter().sum::<f64>() / c as f64;
                    let var = tok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let sd = (var + 1e-6).sqrt();
                    for ch in 0..c {
                        tok[ch] = (tok[ch] - mean) / sd * cw.norm_gain.data()[ch] + cw.norm_bias.data()[ch];
                    }
                }
                out.push(tok);
            }
        }
        out
    }

    fn attend(&self, x: &[f64], h: usize, w: usize, op: CompressionOp, r: usize, mode: PoolMode) -> Vec<f64> {
        let (c, n) = (self.c, h * w);
        let mut q = vec![vec![0.0; c]; n];
        let mut k = vec![vec![0.0; c]; n];
        let mut v = vec![vec![0.0; c]; n];
        for t in 0..n {
            for o in 0..c {
                for i in 0..c {
                    let xi = x[t * c + i];
                    q[t][o] += xi * self.wqkv[i * 3 * c + o];
                    k[t][o] += xi * self.wqkv[i * 3 * c + c + o];
                    v[t][o] += xi * self.wqkv[i * 3 * c + 2 * c + o];
                }
            }
        }
        let k = self.compress(&k, h, w, op, r, mode);
        let v = self.compress(&v, h, w, op, r, mode);
        let m = k.len();
        let dk = c / self.heads;
        let mut heads_out = vec![vec![0.0; c]; n];
        for hd in 0..self.heads {
            for t in 0..n {
                let mut s = vec![0.0; m];
                for j in 0..m {
                    for d in 0..dk {
                        s[j] += q[t][hd * dk + d] * k[j][hd * dk + d];
                    }
                    s[j] /= (dk as f64).sqrt();
                }
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                for j in 0..m {
                    let pj = (s[j] - mx).exp() / z;
                    for d in 0..dk {
                        heads_out[t][hd * dk + d] += pj * v[j][hd * dk + d];
                    }
                }
            }
        }
        let mut y = vec![0.0; n * c];
        for t in 0..n {
            for o in 0..c {
                for i in 0..c {
                    y[t * c + o] += heads_out[t][i] * self.wout[i * c + o];
                }
            }
        }
        y
    }
}

fn perturbed_conv(c: usize, r: usize, rng: &mut Rng) -> ConvWeights {
    let mut cw = conv_avg_init(r, c, rng);
    for t in [&mut cw.kernel, &mut cw.bias, &mut cw.norm_gain, &mut cw.norm_bias] {
        for v in t.data_mut() {
            *v += 0.2 * rng.normal();
        }
    }
    cw
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn matches_loop_oracle_for_every_operator() {
    let mut rng = Rng::new(1234);
    let (h, w, c, heads) = (8, 8, 4, 2);
    let x = TokenGrid::new(1, h, w, c, rng.normal_vec(h * w * c)).unwrap();
    for (op, mode) in [
        (CompressionOp::None, PoolMode::Mean),
        (CompressionOp::Discard, PoolMode::Mean),
        (CompressionOp::Pool, PoolMode::Mean),
        (CompressionOp::Pool, PoolMode::Nearest),
        (CompressionOp::Conv, PoolMode::Mean),
    ] {
        let spec = CompressionSpec::new(op, 2, (1, 1)).with_pool_mode(mode);
        let mut weights = AttentionWeights::random(c, heads, &spec, &mut rng).unwrap();
        if op == CompressionOp::Conv {
            weights.conv = Some(perturbed_conv(c, 2, &mut rng));
        }
        let got = kv_compressed_attention(&x, &spec, &weights).unwrap();
        let oracle = Oracle {
            c,
            heads,
            wqkv: weights.qkv_proj.data(),
            wout: weights.out_proj.data(),
            conv: weights.conv.as_ref(),
        };
        let want = oracle.attend(x.sample(0), h, w, op, 2, mode);
        let err = max_diff(got.data(), &want);
        assert!(err < 1e-10, "{op:?}/{mode:?}: {err}");
    }
}

#[test]
fn stride_one_equals_dense_bitwise() {
    let mut rng = Rng::new(99);
    for _ in 0..10 {
        let h = rng.range_inclusive(1, 8);
        let w = rng.range_inclusive(1, 8);
        let heads = [1, 2, 4][rng.below(3)];
        let c = heads * rng.range_inclusive(1, 4);
        let x = TokenGrid::new(2, h, w, c, rng.normal_vec(2 * h * w * c)).unwrap();
        let weights = AttentionWeights::random(c, heads, &CompressionSpec::none(), &mut rng).unwrap();
        let dense = dense_attention(&x, &weights).unwrap();
        for op in CompressionOp::ALL {
            let y = kv_compressed_attention(&x, &CompressionSpec::new(op, 1, (1, 1)), &weights).unwrap();
            assert_eq!(y, dense);
        }
    }
}

#[test]
fn identical_keys_give_uniform_attention() {
    // Every token equal -> every compressed key equal -> uniform softmax,
    // output = out_proj(mean of compressed V) for every query.
    let mut rng = Rng::new(5);
    let (h, w, c) = (4, 4, 4);
    let tok = rng.normal_vec(c);
    let x = TokenGrid::new(1, h, w, c, (0..h * w).flat_map(|_| tok.clone()).collect()).unwrap();
    let spec = CompressionSpec::new(CompressionOp::Pool, 2, (1, 1));
    let weights = AttentionWeights::random(c, 2, &spec, &mut rng).unwrap();
    let y = kv_compressed_attention(&x, &spec, &weights).unwrap();
    let wq = weights.qkv_proj.data();
    let v: Vec<f64> = (0..c).map(|o| (0..c).map(|i| tok[i] * wq[i * 3 * c + 2 * c + o]).sum()).collect();
    let want: Vec<f64> = (0..c).map(|o| (0..c).map(|i| v[i] * weights.out_proj.data()[i * c + o]).sum()).collect();
    for row in y.data().chunks(c) {
        assert!(max_diff(row, &want) < 1e-12);
    }
}

#[test]
fn token_counts() {
    let mut rng = Rng::new(6);
    let x = TokenGrid::new(2, 6, 6, 4, rng.normal_vec(2 * 36 * 4)).unwrap();
    for r in [1, 2, 3, 6] {
        for op in [CompressionOp::Discard, CompressionOp::Pool, CompressionOp::Conv] {
            let spec = CompressionSpec::new(op, r, (1, 1));
            let weights = AttentionWeights::random(4, 2, &spec, &mut rng).unwrap();
            assert_eq!(compress_tokens(&x, &spec, &weights).unwrap().tokens(), 36 / (r * r));
            assert_eq!(kv_compressed_attention(&x, &spec, &weights).unwrap().tokens(), 36);
        }
    }
}

#[test]
fn batch_permutation_commutes() {
    let mut rng = Rng::new(8);
    let (b, h, w, c) = (3, 4, 4, 4);
    let x = TokenGrid::new(b, h, w, c, rng.normal_vec(b * h * w * c)).unwrap();
    let per = h * w * c;
    let perm = [2usize, 0, 1];
    let xp: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * per..(i + 1) * per].to_vec()).collect();
    let xp = TokenGrid::new(b, h, w, c, xp).unwrap();
    let spec = CompressionSpec::new(CompressionOp::Conv, 2, (1, 1));
    let weights = AttentionWeights::random(c, 2, &spec, &mut rng).unwrap();
    let y = kv_compressed_attention(&x, &spec, &weights).unwrap();
    let yp = kv_compressed_attention(&xp, &spec, &weights).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(yp.sample(k), y.sample(i));
    }
}

#[test]
fn gradients_pass_for_every_operator() {
    use kvdit::kvattn::{self_attention_backward, self_attention_forward, AttnView, ConvView};
    let mut rng = Rng::new(77);
    let (h, w, c, heads) = (4, 4, 4, 2);
    for op in [CompressionOp::Discard, CompressionOp::Pool, CompressionOp::Conv] {
        let spec = CompressionSpec::new(op, 2, (1, 1));
        let x = Tensor::randn(&[h * w, c], 1.0, &mut rng);
        let qkv = Tensor::randn(&[c, 3 * c], 0.5, &mut rng);
        let out = Tensor::randn(&[c, c], 0.5, &mut rng);
        let cw = perturbed_conv(c, 2, &mut rng);
        let probe = Tensor::randn(&[h * w, c], 1.0, &mut rng);
        let params = vec![x, qkv, out, cw.kernel, cw.bias, cw.norm_gain, cw.norm_bias];
        let report = check_gradients(
            |p: &[Tensor]| {
                let view = AttnView {
                    channels: c,
                    heads,
                    qkv: p[1].data(),
                    out: p[2].data(),
                    conv: Some(ConvView { kernel: p[3].data(), bias: p[4].data(), norm_gain: p[5].data(), norm_bias: p[6].data() }),
                };
                let (y, cache) = self_attention_forward(p[0].data(), h, w, &spec, &view)?;
                let loss = y.iter().zip(probe.data()).map(|(a, b)| a * b).sum();
                let (dx, g) = self_attention_backward(&cache, &view, probe.data());
                let conv = g.conv.unwrap_or_default();
                let or_zero = |v: Vec<f64>, n: usize| if v.is_empty() { vec![0.0; n] } else { v };
                Ok((loss, vec![
                    Tensor::new(p[0].shape(), dx)?,
                    Tensor::new(p[1].shape(), g.qkv)?,
                    Tensor::new(p[2].shape(), g.out)?,
                    Tensor::new(p[3].shape(), or_zero(conv.kernel, 4 * c))?,
                    Tensor::new(&[c], or_zero(conv.bias, c))?,
                    Tensor::new(&[c], or_zero(conv.norm_gain, c))?,
                    Tensor::new(&[c], or_zero(conv.norm_bias, c))?,
                ]))
            },
            &params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{op:?}: {report:?}");
    }
}
