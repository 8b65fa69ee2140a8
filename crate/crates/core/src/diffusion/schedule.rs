use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Precomputed `beta`, `alpha` and `alpha_bar` tables, indexed by `t` in
/// `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// `T` betas linearly spaced from `beta_start` to `beta_end` inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        bail!(Config, "schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        bail!(Config, "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}");
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    /// `T=1000`, betas `1e-4 -> 0.02`.
    pub fn default_linear() -> Self {
        linear_schedule(1000, 1e-4, 0.02).expect("valid defaults")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            bail!(Config, "timestep {t} outside [1, {}]", self.steps());
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`, with one timestep per
/// leading-axis sample.
pub fn q_sample(x0: &Tensor, t: &[usize], noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        bail!(Dimension, "x0 {:?} vs noise {:?}", x0.shape(), noise.shape());
    }
    let b = x0.shape()[0];
    if t.len() != b {
        bail!(Dimension, "{} timesteps for {b} samples", t.len());
    }
    let per = x0.len() / b;
    let mut out = Vec::with_capacity(x0.len());
    for (s, &ts) in t.iter().enumerate() {
        schedule.check(ts)?;
        let ab = schedule.alpha_bar(ts);
        let (a, c) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xs = &x0.data()[s * per..(s + 1) * per];
        let ns = &noise.data()[s * per..(s + 1) * per];
        out.extend(xs.iter().zip(ns).map(|(x, n)| a * x + c * n));
    }
    Tensor::new(x0.shape(), out)
}
