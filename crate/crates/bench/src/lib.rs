//! Shared fixtures for the criterion benches.

use kvdit::bench::F32Weights;
use kvdit::numerics::{Rng, Stream};

/// Seed-fixed f32 input and weights for an `h x w` grid with `c` channels.
pub fn fixture(h: usize, w: usize, c: usize, stride: usize) -> (Vec<f32>, F32Weights) {
    let mut rng = Rng::derive(0, Stream::Bench, (h * w) as u64);
    let wts = F32Weights::random(c, stride, &mut rng);
    let x = (0..h * w * c).map(|_| rng.normal() as f32).collect();
    (x, wts)
}
