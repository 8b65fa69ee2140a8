use super::codec::LinearCodec;
use super::report::{Arm, Experiment, ExperimentReport, SeedOutcome};
use crate::backbone::{ConvInit, Dit, PeInit};
use crate::data::SyntheticDataset;
use crate::diffusion::{probe_loss, train_step, NoiseSchedule, ProbeBatch, TrainState};
use crate::error::{bail, Result};
use crate::kvattn::CompressionSpec;
use crate::numerics::{Rng, Stream};

/// Knobs shared by all races. Thresholds are fixed here, before any run.
#[derive(Clone, Debug, PartialEq)]
pub struct RaceConfig {
    /// Training steps per arm.
    pub budget: usize,
    pub batch_size: usize,
    /// Adam step size for both arms. Kept below the pre-training rate: a
    /// fresh optimizer at the full rate knocks an adapted model off its
    /// minimum before it starts to improve.
    pub lr: f64,
    /// Trailing window for threshold crossing and converged loss.
    pub window: usize,
    /// Samples per probe batch.
    pub probe_size: usize,
    /// Steps (0 = before training) at which probe losses are recorded.
    pub probe_steps: Vec<usize>,
    /// Threshold as a multiple of the base model's converged loss.
    pub threshold_factor: f64,
    /// Codec swap: the fine-tune arm must need at most this fraction of the
    /// scratch arm's steps.
    pub max_step_ratio: f64,
    /// Upscale: step whose probe losses decide the race.
    pub compare_step: usize,
    /// Retrofit: independent probe batches for step-0 divergence.
    pub probe_batches: usize,
    /// Standard deviation of a freshly drawn positional embedding.
    pub random_pe_std: f64,
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            batch_size: 16,
            lr: 2e-4,
            window: 50,
            probe_size: 256,
            probe_steps: vec![0, 100],
            threshold_factor: 1.2,
            max_step_ratio: 0.5,
            compare_step: 100,
            probe_batches: 4,
            random_pe_std: 0.02,
        }
    }
}

/// Dataset, codec and schedule an experiment trains against.
#[derive(Clone, Copy, Debug)]
pub struct RaceEnv<'a> {
    pub data: &'a SyntheticDataset,
    pub codec: &'a LinearCodec,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a RaceConfig,
}

/// First 1-based step whose trailing `window`-step mean is `<= threshold`.
/// Steps before a full window is available never count. A `window` of 0 is
/// treated as 1.
pub fn steps_to_threshold(curve: &[f64], threshold: f64, window: usize) -> Option<usize> {
    let w = window.max(1);
    (w..=curve.len()).find(|&end| curve[end - w..end].iter().sum::<f64>() / w as f64 <= threshold)
}

fn trailing_mean(curve: &[f64], window: usize) -> f64 {
    let w = window.clamp(1, curve.len().max(1));
    let tail = &curve[curve.len().saturating_sub(w)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Probe batch `index` for `seed`: fixed images (encoded by `codec`),
/// stratified timesteps and fixed noise.
pub fn make_probe(
    data: &SyntheticDataset,
    codec: &LinearCodec,
    size: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    index: u64,
) -> Result<ProbeBatch> {
    let mut rng = Rng::derive(seed, Stream::Probe, 1 << 32 | index);
    let idx: Vec<usize> = (0..size.max(1)).map(|_| rng.below(data.count)).collect();
    let (x, labels) = data.batch(&idx)?;
    Ok(ProbeBatch::new(codec.encode(&x)?, labels, schedule, seed, index))
}

/// A trained base model with its loss history.
#[derive(Clone, Debug)]
pub struct BaseRun {
    pub model: Dit,
    pub losses: Vec<f64>,
    /// Mean training loss over the final window.
    pub final_train_loss: f64,
    /// Final model's mean probe loss over `probe_batches` probes of `seed`.
    /// Lower variance than the training window, and free of the drift
    /// inside it.
    pub converged_loss: f64,
}

impl BaseRun {
    /// Wraps an already trained model. `seed` selects the probe batches the
    /// converged loss is measured on.
    pub fn evaluate(model: Dit, losses: Vec<f64>, env: &RaceEnv<'_>, seed: u64) -> Result<Self> {
        let final_train_loss = trailing_mean(&losses, env.config.window);
        let batches = env.config.probe_batches.max(1);
        let mut converged_loss = 0.0;
        for index in 0..batches as u64 {
            let probe = make_probe(env.data, env.codec, env.config.probe_size, env.schedule, seed, index)?;
            converged_loss += probe_loss(&model, &probe, env.schedule)?;
        }
        converged_loss /= batches as f64;
        log::info!("base window loss {final_train_loss:.5}, probe loss {converged_loss:.5}");
        Ok(Self { model, losses, final_train_loss, converged_loss })
    }
}

/// Trains `model` for `steps` steps on `env`'s data in `env.codec` space.
pub fn train_base(model: Dit, env: &RaceEnv<'_>, steps: usize, seed: u64) -> Result<BaseRun> {
    let mut state = TrainState::new(model, env.config.lr, seed);
    for step in 0..steps {
        let (x, labels) = env.data.batch(&env.data.step_indices(seed, step, env.config.batch_size))?;
        train_step(&mut state, &env.codec.encode(&x)?, &labels, env.schedule)?;
    }
    BaseRun::evaluate(state.model, state.loss_history, env, seed)
}

/// Trains one arm for the full budget, recording probe losses at
/// `probe_steps`. The data order and noise depend only on `seed`.
pub fn train_arm(name: &str, model: Dit, env: &RaceEnv<'_>, seed: u64, probe: &ProbeBatch, probe_steps: &[usize]) -> Result<Arm> {
    let cfg = env.config;
    let mut state = TrainState::new(model, cfg.lr, seed);
    let mut probes = Vec::new();
    for step in 0..=cfg.budget {
        if probe_steps.contains(&step) {
            probes.push((step, probe_loss(&state.model, probe, env.schedule)?));
        }
        if step == cfg.budget {
            break;
        }
        let (x, labels) = env.data.batch(&env.data.step_indices(seed, step, cfg.batch_size))?;
        train_step(&mut state, &env.codec.encode(&x)?, &labels, env.schedule)?;
    }
    log::debug!("arm {name} seed {seed}: final loss {:?}", state.loss_history.last());
    Ok(Arm {
        name: name.to_string(),
        losses: state.loss_history,
        probes,
        steps_to_threshold: None,
        divergence: Vec::new(),
    })
}

fn majority(outcomes: &[SeedOutcome]) -> bool {
    2 * outcomes.iter().filter(|o| o.pass).count() > outcomes.len()
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        bail!(Config, "a race needs at least one seed");
    }
    Ok(())
}

/// Fine-tunes the base model under `codec_b` and races it against a model
/// trained from scratch under `codec_b`. `env.codec` is the base model's
/// codec.
pub fn run_codec_swap(base: &BaseRun, env: &RaceEnv<'_>, codec_b: &LinearCodec, seeds: &[u64]) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    let cfg = env.config;
    let model_c = base.model.config().in_channels;
    if env.codec.channels() != model_c || codec_b.channels() != model_c {
        bail!(Config, "codecs over {} and {} channels for a model with {model_c}", env.codec.channels(), codec_b.channels());
    }
    let threshold = cfg.threshold_factor * base.converged_loss;
    let env_b = RaceEnv { codec: codec_b, ..*env };
    let mut probe_steps: Vec<usize> = cfg.probe_steps.iter().copied().filter(|&s| s <= cfg.budget).collect();
    if !probe_steps.contains(&0) {
        probe_steps.insert(0, 0);
    }
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let probe = make_probe(env.data, codec_b, cfg.probe_size, env.schedule, seed, 0)?;
        let mut ft = train_arm("finetune", base.model.clone(), &env_b, seed, &probe, &probe_steps)?;
        let scratch_model = Dit::new(base.model.config().clone(), seed)?;
        let mut scratch = train_arm("scratch", scratch_model, &env_b, seed, &probe, &probe_steps)?;
        ft.steps_to_threshold = steps_to_threshold(&ft.losses, threshold, cfg.window);
        scratch.steps_to_threshold = steps_to_threshold(&scratch.losses, threshold, cfg.window);
        // A scratch arm that never crosses is credited with budget + 1 steps.
        let scratch_steps = scratch.steps_to_threshold.unwrap_or(cfg.budget + 1);
        let pass = ft.steps_to_threshold.is_some_and(|s| s as f64 <= cfg.max_step_ratio * scratch_steps as f64);
        let note = format!(
            "finetune {} vs scratch {} steps to loss {threshold:.5}",
            fmt_steps(ft.steps_to_threshold),
            fmt_steps(scratch.steps_to_threshold)
        );
        outcomes.push(SeedOutcome { seed, arms: vec![ft, scratch], pass, note });
    }
    let passed = majority(&outcomes);
    Ok(ExperimentReport {
        experiment: Experiment::CodecSwap,
        detail: format!("{} -> {}", env.codec.id(), codec_b.id()),
        seeds: seeds.to_vec(),
        budget: cfg.budget,
        threshold: Some(threshold),
        base_loss: Some(base.converged_loss),
        criterion: format!(
            "finetune needs <= {:.0}% of scratch steps, majority of seeds",
            100.0 * cfg.max_step_ratio
        ),
        outcomes,
        passed,
    })
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn fmt_steps(s: Option<usize>) -> String {
    s.map_or_else(|| "never".to_string(), |s| s.to_string())
}

/// Moves the base model to a larger patch grid and races an interpolated
/// positional embedding against a random one. `env.data` is the base
/// resolution dataset; the same samples are rendered at the target size.
pub fn run_upscale(base: &Dit, env: &RaceEnv<'_>, target: (usize, usize), seeds: &[u64]) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    let cfg = env.config;
    let grid = base.config().grid;
    if target.0 < grid.0 || target.1 < grid.1 {
        bail!(Config, "target grid {target:?} is smaller than the base grid {grid:?}");
    }
    if cfg.compare_step > cfg.budget {
        bail!(Config, "compare step {} exceeds the budget {}", cfg.compare_step, cfg.budget);
    }
    let p = base.config().patch_size;
    let data_hr = env.data.at_resolution(target.0 * p, target.1 * p);
    let env_hr = RaceEnv { data: &data_hr, ..*env };
    let mut probe_steps: Vec<usize> = cfg.probe_steps.iter().copied().filter(|&s| s <= cfg.budget).collect();
    for s in [0, cfg.compare_step, cfg.budget] {
        if !probe_steps.contains(&s) {
            probe_steps.push(s);
        }
    }
    probe_steps.sort_unstable();
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let probe = make_probe(&data_hr, env.codec, cfg.probe_size, env.schedule, seed, 0)?;
        let interp = base.with_grid(target, PeInit::Interpolate, seed)?;
        let random = base.with_grid(target, PeInit::Random { std: cfg.random_pe_std }, seed)?;
        let a = train_arm("interpolate", interp, &env_hr, seed, &probe, &probe_steps)?;
        let b = train_arm("random", random, &env_hr, seed, &probe, &probe_steps)?;
        let (la, lb) = (a.probe_at(cfg.compare_step).unwrap(), b.probe_at(cfg.compare_step).unwrap());
        let pass = la < lb;
        let note = format!("probe loss at step {}: interpolate {la:.5} vs random {lb:.5}", cfg.compare_step);
        outcomes.push(SeedOutcome { seed, arms: vec![a, b], pass, note });
    }
    let passed = majority(&outcomes);
    let base_probe = make_probe(env.data, env.codec, cfg.probe_size, env.schedule, seeds[0], 0)?;
    Ok(ExperimentReport {
        experiment: Experiment::Upscale,
        detail: format!("{}x{} -> {}x{}", grid.0, grid.1, target.0, target.1),
        seeds: seeds.to_vec(),
        budget: cfg.budget,
        threshold: None,
        base_loss: Some(probe_loss(base, &base_probe, env.schedule)?),
        criterion: format!("interpolate probe loss below random at step {}, majority of seeds", cfg.compare_step),
        outcomes,
        passed,
    })
}

/// Mean squared difference between two models' noise predictions.
fn divergence(a: &Dit, b: &Dit, probe: &ProbeBatch, schedule: &NoiseSchedule) -> Result<f64> {
    let pa = probe.predictions(a, schedule, 32)?;
    let pb = probe.predictions(b, schedule, 32)?;
    Ok(pa.data().iter().zip(pb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / pa.len() as f64)
}

/// Adds conv KV compression to the base model and races the averaging
/// init against a random init, judged by step-0 divergence from the base
/// model on every probe batch.
pub fn run_kv_retrofit(base: &Dit, env: &RaceEnv<'_>, spec: CompressionSpec, seeds: &[u64]) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    let cfg = env.config;
    let mut outcomes = Vec::new();
    let probe_steps: Vec<usize> = cfg.probe_steps.iter().copied().filter(|&s| s <= cfg.budget).collect();
    let per_batch = (cfg.probe_size / cfg.probe_batches.max(1)).max(1);
    for &seed in seeds {
        let avg = base.retrofit_compression(spec, ConvInit::Avg, seed)?;
        let random = base.retrofit_compression(spec, ConvInit::Random, seed)?;
        let mut div_avg = Vec::new();
        let mut div_random = Vec::new();
        for k in 0..cfg.probe_batches.max(1) {
            let probe = make_probe(env.data, env.codec, per_batch, env.schedule, seed, k as u64 + 1)?;
            div_avg.push(divergence(base, &avg, &probe, env.schedule)?);
            div_random.push(divergence(base, &random, &probe, env.schedule)?);
        }
        let pass = div_avg.iter().zip(&div_random).all(|(a, r)| a < r);
        let note = format!("step-0 divergence avg [{}] vs random [{}]", fmt_list(&div_avg), fmt_list(&div_random));
        let probe = make_probe(env.data, env.codec, cfg.probe_size, env.schedule, seed, 0)?;
        let mut a = train_arm("avg", avg, env, seed, &probe, &probe_steps)?;
        let mut b = train_arm("random", random, env, seed, &probe, &probe_steps)?;
        a.divergence = div_avg;
        b.divergence = div_random;
        outcomes.push(SeedOutcome { seed, arms: vec![a, b], pass, note });
    }
    let passed = outcomes.iter().all(|o| o.pass);
    Ok(ExperimentReport {
        experiment: Experiment::KvRetrofit,
        detail: format!("{} R={} blocks {}..={}", spec.op, spec.stride, spec.layers.0, spec.layers.1),
        seeds: seeds.to_vec(),
        budget: cfg.budget,
        threshold: None,
        base_loss: None,
        criterion: "avg-init divergence below random-init on every probe batch, every seed".to_string(),
        outcomes,
        passed,
    })
}
