use super::schedule::NoiseSchedule;
use crate::backbone::Dit;
use crate::error::{bail, Result};
use crate::numerics::{Rng, Tensor};

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor>;
}

impl NoisePredictor for Dit {
    fn predict(&self, x: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor> {
        self.forward(x, t, labels)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplerKind {
    /// Ancestral sampling with posterior variance.
    #[default]
    Ancestral,
    /// Noise-free update (DDIM with eta = 0).
    Deterministic,
}

/// `steps` evenly spaced timesteps in `[1, T]`, ascending and ending at `T`.
pub fn timestep_subset(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps).map(|i| i * total / steps).collect()
}

/// Denoises Gaussian noise of `shape` into images, making exactly `steps`
/// model evaluations. The result is clamped to `[-1, 1]`.
pub fn sample<M: NoisePredictor>(
    model: &M,
    schedule: &NoiseSchedule,
    labels: &[usize],
    shape: &[usize],
    rng: &mut Rng,
    steps: usize,
    kind: SamplerKind,
) -> Result<Tensor> {
    if steps == 0 || steps > schedule.steps() {
        bail!(Config, "sampling steps must be in [1, {}], got {steps}", schedule.steps());
    }
    let b = shape[0];
    let mut x = Tensor::randn(shape, 1.0, rng);
    let ts = timestep_subset(schedule.steps(), steps);
    for i in (0..steps).rev() {
        let t = ts[i];
        let t_prev = if i == 0 { 0 } else { ts[i - 1] };
        let eps = model.predict(&x, &vec![t; b], labels)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
        let next: Vec<f64> = match kind {
            SamplerKind::Deterministic => x
                .data()
                .iter()
                .zip(eps.data())
                .map(|(&xt, &e)| {
                    let x0 = (xt - s1a * e) / sa;
                    ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e
                })
                .collect(),
            SamplerKind::Ancestral => {
                let beta = 1.0 - ab / ab_prev;
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(eps.data())
                    .map(|(&xt, &e)| c0 * ((xt - s1a * e) / sa) + ct * xt)
                    .collect();
                if t_prev == 0 {
                    data
                } else {
                    data.into_iter().map(|m| m + sigma * rng.normal()).collect()
                }
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            bail!(Numerical, "non-finite sample at sampling step {} (t = {t})", steps - i);
        }
        x = Tensor::new(shape, next)?;
    }
    x.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(x)
}
