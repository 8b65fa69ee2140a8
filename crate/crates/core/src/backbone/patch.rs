use crate::error::{bail, Result};
use crate::kvattn::TokenGrid;
use crate::numerics::ops::linear;
use crate::numerics::Tensor;

/// Cuts `b` images of `h x w x c` into non-overlapping `p x p` patches in
/// row-major patch order. Each row is one patch flattened as `[py][px][c]`.
pub fn patchify_raw(x: &[f64], b: usize, h: usize, w: usize, c: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(x.len());
    for s in 0..b {
        let img = &x[s * h * w * c..(s + 1) * h * w * c];
        for i in 0..gh {
            for j in 0..gw {
                for py in 0..p {
                    let row = (i * p + py) * w + j * p;
                    out.extend_from_slice(&img[row * c..(row + p) * c]);
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify_raw`].
pub fn unpatchify_raw(t: &[f64], b: usize, h: usize, w: usize, c: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; t.len()];
    let pd = p * p * c;
    for s in 0..b {
        let img = &mut out[s * h * w * c..(s + 1) * h * w * c];
        for i in 0..gh {
            for j in 0..gw {
                let patch = &t[((s * gh + i) * gw + j) * pd..][..pd];
                for py in 0..p {
                    let row = (i * p + py) * w + j * p;
                    img[row * c..(row + p) * c].copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
                }
            }
        }
    }
    out
}

fn image_dims(image: &Tensor, p: usize) -> Result<(usize, usize, usize, usize)> {
    let [b, h, w, c] = *image.shape() else {
        bail!(Dimension, "image must be [B, H, W, C], got {:?}", image.shape());
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        bail!(Layout, "image {h}x{w} is not divisible by patch size {p}");
    }
    Ok((b, h, w, c))
}

/// Tokenises images into a `(H/p) x (W/p)` grid; `proj` (`p*p*C_in x C`)
/// maps each flattened patch to the model width, `None` keeps raw patches.
pub fn patchify(image: &Tensor, p: usize, proj: Option<&Tensor>) -> Result<TokenGrid> {
    let (b, h, w, c) = image_dims(image, p)?;
    let raw = patchify_raw(image.data(), b, h, w, c, p);
    let pd = p * p * c;
    let (data, width) = match proj {
        None => (raw, pd),
        Some(m) => {
            let [rows, out] = *m.shape() else {
                bail!(Dimension, "projection must be 2-D, got {:?}", m.shape());
            };
            if rows != pd {
                bail!(Dimension, "projection expects {rows} inputs, patches have {pd}");
            }
            (linear(&raw, raw.len() / pd, m.data(), pd, out, None), out)
        }
    };
    TokenGrid::new(b, h / p, w / p, width, data)
}

/// Reassembles `out_channels`-channel images from a token grid; `proj`
/// (`C x p*p*out_channels`) maps tokens back to patch space first.
pub fn unpatchify(tokens: &TokenGrid, p: usize, out_channels: usize, proj: Option<&Tensor>) -> Result<Tensor> {
    let pd = p * p * out_channels;
    let rows = tokens.batch() * tokens.tokens();
    let data = match proj {
        None if tokens.channels() == pd => tokens.data().to_vec(),
        None => bail!(Dimension, "tokens have {} channels, patches need {pd}", tokens.channels()),
        Some(m) => {
            if m.shape() != [tokens.channels(), pd] {
                bail!(Dimension, "projection {:?} does not map {} -> {pd}", m.shape(), tokens.channels());
            }
            linear(tokens.data(), rows, m.data(), tokens.channels(), pd, None)
        }
    };
    let (h, w) = (tokens.height() * p, tokens.width() * p);
    Tensor::new(&[tokens.batch(), h, w, out_channels], unpatchify_raw(&data, tokens.batch(), h, w, out_channels, p))
}
