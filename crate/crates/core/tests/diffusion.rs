use std::cell::Cell;

use kvdit::backbone::{Dit, ModelConfig};
use kvdit::data::{Generator, SyntheticDataset};
use kvdit::diffusion::{
    linear_schedule, q_sample, sample, train_step, NoisePredictor, NoiseSchedule, SamplerKind, TrainState,
};
use kvdit::numerics::{Rng, Tensor};
use kvdit::Result;

/// Double-double arithmetic, used as an independent high-precision oracle.
#[derive(Clone, Copy)]
struct Dd(f64, f64);

impl Dd {
    fn from(x: f64) -> Self {
        Dd(x, 0.0)
    }

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        Dd(s, (a - (s - bb)) + (b - bb))
    }

    fn add(self, o: Dd) -> Dd {
        let Dd(s, e) = Dd::two_sum(self.0, o.0);
        let e = e + self.1 + o.1;
        Dd::two_sum(s, e)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let e = self.0.mul_add(o.0, -p) + self.0 * o.1 + self.1 * o.0;
        Dd::two_sum(p, e)
    }

    fn div_int(self, d: f64) -> Dd {
        let q = self.0 / d;
        let r = Dd::from(q).mul(Dd::from(-d)).add(self);
        Dd::two_sum(q, r.0 / d)
    }

    fn value(self) -> f64 {
        self.0 + self.1
    }
}

#[test]
fn alpha_bar_matches_high_precision_product() {
    let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let mut prod = Dd::from(1.0);
    for i in 0..1000 {
        let frac = Dd::from(i as f64).div_int(999.0);
        let beta = Dd::from(1e-4).add(Dd::from(0.02 - 1e-4).mul(frac));
        prod = prod.mul(Dd::from(1.0).add(Dd(-beta.0, -beta.1)));
        assert!((s.alpha_bars()[i] - prod.value()).abs() < 1e-12, "t = {}", i + 1);
    }
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn q_sample_second_moment() {
    let s = NoiseSchedule::default_linear();
    let mut rng = Rng::new(17);
    let dim = 64;
    let x0 = Tensor::randn(&[1, dim], 1.0, &mut rng);
    let norm2: f64 = x0.data().iter().map(|v| v * v).sum();
    for t in [1, 250, 999] {
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let noise = Tensor::randn(&[1, dim], 1.0, &mut rng);
            let xt = q_sample(&x0, &[t], &noise, &s).unwrap();
            acc += xt.data().iter().map(|v| v * v).sum::<f64>();
        }
        let got = acc / draws as f64;
        let ab = s.alpha_bar(t);
        let want = ab * norm2 + (1.0 - ab) * dim as f64;
        assert!((got - want).abs() / want < 0.02, "t={t}: {got} vs {want}");
    }
}

fn toy_data() -> (ModelConfig, SyntheticDataset) {
    let cfg = ModelConfig::toy();
    let (h, w) = cfg.image_size();
    (cfg, SyntheticDataset::new(Generator::GaussianBlobs, h, w, 3, 64, 0).unwrap())
}

#[test]
fn zero_output_model_loss_is_unit_noise_variance() {
    let (cfg, data) = toy_data();
    let sched = NoiseSchedule::default_linear();
    let mut state = TrainState::new(Dit::new(cfg, 0).unwrap(), 0.0, 5);
    let (x, l) = data.batch(&data.step_indices(5, 0, 256)).unwrap();
    let loss = train_step(&mut state, &x, &l, &sched).unwrap();
    assert!((0.95..=1.05).contains(&loss), "{loss}");
}

#[test]
fn zero_learning_rate_keeps_weights_bitwise() {
    let (cfg, data) = toy_data();
    let sched = NoiseSchedule::default_linear();
    let model = Dit::new(cfg, 1).unwrap();
    let before: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut state = TrainState::new(model, 0.0, 2);
    for step in 0..3 {
        let (x, l) = data.batch(&data.step_indices(2, step, 4)).unwrap();
        train_step(&mut state, &x, &l, &sched).unwrap();
    }
    assert_eq!(state.loss_history.len(), 3);
    assert_eq!(state.step, 3);
    for (t, b) in state.model.params().tensors().iter().zip(&before) {
        assert_eq!(t.data(), b.as_slice());
    }
}

fn run(cfg: &ModelConfig, data: &SyntheticDataset, steps: usize, seed: u64) -> TrainState {
    let sched = NoiseSchedule::default_linear();
    let mut state = TrainState::new(Dit::new(cfg.clone(), seed).unwrap(), 1e-3, seed);
    for step in 0..steps {
        let (x, l) = data.batch(&data.step_indices(seed, step, 4)).unwrap();
        train_step(&mut state, &x, &l, &sched).unwrap();
    }
    state
}

#[test]
fn training_is_reproducible_and_resumable() {
    let (cfg, data) = toy_data();
    let a = run(&cfg, &data, 8, 3);
    let b = run(&cfg, &data, 8, 3);
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.loss_history.len(), a.step);

    let sched = NoiseSchedule::default_linear();
    let mut resumed = run(&cfg, &data, 4, 3).clone();
    for step in 4..8 {
        let (x, l) = data.batch(&data.step_indices(3, step, 4)).unwrap();
        train_step(&mut resumed, &x, &l, &sched).unwrap();
    }
    assert_eq!(resumed.loss_history, a.loss_history);
    for (x, y) in resumed.model.params().tensors().iter().zip(a.model.params().tensors()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn overfitting_one_image_halves_the_loss() {
    let (cfg, data) = toy_data();
    let sched = NoiseSchedule::default_linear();
    let mut state = TrainState::new(Dit::new(cfg, 4).unwrap(), 1e-3, 4);
    let (x, l) = data.batch(&[7; 8]).unwrap();
    for _ in 0..200 {
        train_step(&mut state, &x, &l, &sched).unwrap();
    }
    let h = &state.loss_history;
    let start = h[..10].iter().sum::<f64>() / 10.0;
    let end = h[190..].iter().sum::<f64>() / 10.0;
    assert!(end <= 0.5 * start, "{start} -> {end}");
}

#[test]
fn non_finite_loss_names_the_step() {
    let (cfg, data) = toy_data();
    let sched = NoiseSchedule::default_linear();
    let mut model = Dit::new(cfg, 0).unwrap();
    let id = model.params().id("final.proj.bias").unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let mut state = TrainState::new(model, 1e-3, 0);
    let (x, l) = data.batch(&[0, 1]).unwrap();
    let err = train_step(&mut state, &x, &l, &sched).unwrap_err();
    assert!(matches!(err, kvdit::Error::Numerical(_)));
    assert!(err.to_string().contains("step 1"), "{err}");
}

/// Predicts the exact noise that separates `x_t` from a known `x0`.
struct Oracle<'a> {
    x0: &'a Tensor,
    schedule: &'a NoiseSchedule,
    calls: Cell<usize>,
}

impl NoisePredictor for Oracle<'_> {
    fn predict(&self, x: &Tensor, t: &[usize], _labels: &[usize]) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        let ab = self.schedule.alpha_bar(t[0]);
        let eps = x.data().iter().zip(self.x0.data()).map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt());
        Tensor::new(x.shape(), eps.collect())
    }
}

#[test]
fn oracle_model_recovers_x0() {
    let sched = NoiseSchedule::default_linear();
    let x0 = Tensor::from_fn(&[2, 4, 4, 3], |i| ((i as f64) * 0.37).sin() * 0.9);
    for kind in [SamplerKind::Ancestral, SamplerKind::Deterministic] {
        for steps in [1, 50, 1000] {
            let oracle = Oracle { x0: &x0, schedule: &sched, calls: Cell::new(0) };
            let out = sample(&oracle, &sched, &[0; 2], x0.shape(), &mut Rng::new(1), steps, kind).unwrap();
            assert_eq!(oracle.calls.get(), steps);
            for (a, b) in out.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-9, "{kind:?} {steps}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn sampling_is_seeded_and_robust() {
    let (cfg, _) = toy_data();
    let sched = NoiseSchedule::default_linear();
    let model = Dit::new(cfg.clone(), 0).unwrap();
    let (h, w) = cfg.image_size();
    let shape = [2, h, w, 3];
    let labels = vec![1; 8];
    let a = sample(&model, &sched, &labels, &shape, &mut Rng::new(9), 20, SamplerKind::Ancestral).unwrap();
    let b = sample(&model, &sched, &labels, &shape, &mut Rng::new(9), 20, SamplerKind::Ancestral).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    assert!(sample(&model, &sched, &labels, &shape, &mut Rng::new(9), 1001, SamplerKind::Ancestral).is_err());
}

struct Broken;

impl NoisePredictor for Broken {
    fn predict(&self, x: &Tensor, _t: &[usize], _labels: &[usize]) -> Result<Tensor> {
        Ok(Tensor::full(x.shape(), f64::INFINITY))
    }
}

#[test]
fn non_finite_sample_names_the_step() {
    let sched = NoiseSchedule::default_linear();
    let err = sample(&Broken, &sched, &[0], &[1, 2, 2, 1], &mut Rng::new(0), 10, SamplerKind::Ancestral).unwrap_err();
    assert!(err.to_string().contains("sampling step 1"), "{err}");
}
