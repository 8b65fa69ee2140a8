use super::optim::Adam;
use super::schedule::{q_sample, NoiseSchedule};
use crate::backbone::{mse, Dit};
use crate::error::{bail, Result};
use crate::numerics::{Rng, Stream, Tensor};

/// Trainer state. Per-step randomness (timesteps and noise) is derived from
/// `(seed, step)`, so the state needs no live generator and a resumed run
/// draws exactly what an uninterrupted one would.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Dit,
    pub opt: Adam,
    pub step: usize,
    pub seed: u64,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Dit, lr: f64, seed: u64) -> Self {
        let opt = Adam::new(lr, model.params());
        Self { model, opt, step: 0, seed, loss_history: Vec::new() }
    }
}

fn draw_t_and_noise(seed: u64, index: u64, shape: &[usize], schedule: &NoiseSchedule, stream: Stream) -> (Vec<usize>, Tensor) {
    let mut rng = Rng::derive(seed, stream, index);
    let t = (0..shape[0]).map(|_| rng.range_inclusive(1, schedule.steps())).collect();
    let noise = Tensor::randn(shape, 1.0, &mut rng);
    (t, noise)
}

/// One Adam step on the mean squared noise-prediction error of `x0`.
/// Returns the loss, which is also appended to the history.
pub fn train_step(state: &mut TrainState, x0: &Tensor, labels: &[usize], schedule: &NoiseSchedule) -> Result<f64> {
    let (t, noise) = draw_t_and_noise(state.seed, state.step as u64, x0.shape(), schedule, Stream::Noise);
    let xt = q_sample(x0, &t, &noise, schedule)?;
    let (pred, cache) = match state.model.forward_with_cache(&xt, &t, labels) {
        Ok(v) => v,
        Err(e) => bail!(Numerical, "step {}: forward failed at t = {t:?}: {e}", state.step + 1),
    };
    let (loss, d) = mse(&pred, &noise)?;
    if !loss.is_finite() {
        bail!(Numerical, "non-finite loss at step {} (t = {t:?})", state.step + 1);
    }
    let grads = state.model.backward(&cache, &d)?;
    state.opt.step(state.model.params_mut(), &grads);
    state.step += 1;
    state.loss_history.push(loss);
    Ok(loss)
}

/// A fixed evaluation batch: images, labels, timesteps and noise are all
/// frozen so that losses from different models are directly comparable.
#[derive(Clone, Debug)]
pub struct ProbeBatch {
    pub x0: Tensor,
    pub labels: Vec<usize>,
    pub t: Vec<usize>,
    pub noise: Tensor,
}

impl ProbeBatch {
    /// Timesteps are stratified over `[1, T]` (one per sample, in order) to
    /// keep probe losses low-variance; noise comes from probe stream `index`
    /// of `seed`.
    pub fn new(x0: Tensor, labels: Vec<usize>, schedule: &NoiseSchedule, seed: u64, index: u64) -> Self {
        let b = x0.shape()[0];
        let total = schedule.steps();
        let t = (0..b).map(|i| (1 + (2 * i + 1) * total / (2 * b)).min(total)).collect();
        let noise = Tensor::randn(x0.shape(), 1.0, &mut Rng::derive(seed, Stream::Probe, index));
        Self { x0, labels, t, noise }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Predicted noise for every probe sample, evaluated `chunk` at a time.
    pub fn predictions(&self, model: &Dit, schedule: &NoiseSchedule, chunk: usize) -> Result<Tensor> {
        let xt = q_sample(&self.x0, &self.t, &self.noise, schedule)?;
        let b = self.len();
        let per = xt.len() / b;
        let lpb = self.labels.len() / b;
        let mut out = Vec::with_capacity(xt.len());
        let mut start = 0;
        while start < b {
            let end = (start + chunk.max(1)).min(b);
            let mut shape = xt.shape().to_vec();
            shape[0] = end - start;
            let x = Tensor::new(&shape, xt.data()[start * per..end * per].to_vec())?;
            let y = model.forward(&x, &self.t[start..end], &self.labels[start * lpb..end * lpb])?;
            out.extend_from_slice(y.data());
            start = end;
        }
        Tensor::new(xt.shape(), out)
    }
}

/// Mean squared noise-prediction error of `model` on the probe batch.
pub fn probe_loss(model: &Dit, probe: &ProbeBatch, schedule: &NoiseSchedule) -> Result<f64> {
    let pred = probe.predictions(model, schedule, 32)?;
    Ok(mse(&pred, &probe.noise)?.0)
}
