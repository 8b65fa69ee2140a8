//! Binary PGM/PPM writers for sample grids.

use kvdit::Tensor;

use crate::error::{usage, Result};

fn to_byte(x: f64) -> u8 {
    (((x.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Tiles a `[B, H, W, C]` batch in `[-1, 1]` into a near-square grid and
/// encodes it as `P6` (3 channels) or `P5` (otherwise, first channel only).
pub fn encode_grid(images: &Tensor) -> Result<Vec<u8>> {
    let &[b, h, w, c] = images.shape() else {
        return Err(usage(format!("expected [B, H, W, C] images, got {:?}", images.shape())));
    };
    if b == 0 || c == 0 {
        return Err(usage("no images to write"));
    }
    let cols = (b as f64).sqrt().ceil() as usize;
    let rows = b.div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let out_c = if c == 3 { 3 } else { 1 };
    let mut pixels = vec![0u8; gw * gh * out_c];
    let data = images.data();
    for i in 0..b {
        let (gy, gx) = (i / cols * h, i % cols * w);
        for y in 0..h {
            for x in 0..w {
                let src = ((i * h + y) * w + x) * c;
                let dst = ((gy + y) * gw + gx + x) * out_c;
                for k in 0..out_c {
                    pixels[dst + k] = to_byte(data[src + k]);
                }
            }
        }
    }
    let magic = if out_c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}
