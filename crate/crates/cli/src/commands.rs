//! Subcommand implementations. Each writes only inside `output_dir`,
//! starting with `resolved.cfg`; wall-clock data goes to `metadata.txt` so
//! every other artifact is reproducible byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use kvdit::bench::sweep;
use kvdit::data::{SyntheticDataset, LABELS_PER_SAMPLE, LABEL_VOCAB};
use kvdit::diffusion::{linear_schedule, sample, train_step, NoiseSchedule, TrainState};
use kvdit::kvattn::{CompressionOp, CompressionSpec};
use kvdit::numerics::{GradCheckOptions, Stream};
use kvdit::svg::{line_chart, Series};
use kvdit::w2s::{run_codec_swap, run_kv_retrofit, run_upscale, BaseRun, ExperimentReport, LinearCodec, RaceEnv};
use kvdit::{Dit, ModelConfig, Rng, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{Adapt, RawConfig, RunConfig};
use crate::error::{usage, CliError, IoContext, Result};
use crate::image::encode_grid;
use crate::stats::CorpusStats;

/// Output directory handle.
pub struct Outputs {
    dir: PathBuf,
    started: Instant,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).at(dir)?;
        Ok(Self { dir: dir.to_path_buf(), started: Instant::now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes).at(&path)?;
        Ok(path)
    }

    fn metadata(&self, command: &str) -> Result<()> {
        let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let text = format!(
            "command = {command}\nfinished_unix = {unix}\nwall_ms = {:.1}\nversion = {}\n",
            self.started.elapsed().as_secs_f64() * 1e3,
            env!("CARGO_PKG_VERSION")
        );
        self.write("metadata.txt", text).map(|_| ())
    }
}

/// Sets up the output directory and writes the resolved config.
fn begin(raw: &RawConfig, cfg: &RunConfig) -> Result<Outputs> {
    let out = Outputs::create(&cfg.output_dir)?;
    out.write("resolved.cfg", raw.render())?;
    Ok(out)
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    let s = &cfg.schedule;
    Ok(linear_schedule(s.steps, s.beta_start, s.beta_end)?)
}

fn check_data_compat(model: &ModelConfig) -> Result<()> {
    if model.cond_tokens != LABELS_PER_SAMPLE || model.cond_vocab < LABEL_VOCAB {
        return Err(usage(format!(
            "the synthetic datasets emit {LABELS_PER_SAMPLE} labels from a vocabulary of {LABEL_VOCAB}; \
             model.cond_tokens = {} and model.cond_vocab = {} cannot consume them",
            model.cond_tokens, model.cond_vocab
        )));
    }
    Ok(())
}

fn dataset(cfg: &RunConfig, model: &ModelConfig) -> Result<SyntheticDataset> {
    check_data_compat(model)?;
    let (h, w) = model.image_size();
    let t = &cfg.train;
    Ok(SyntheticDataset::new(t.dataset, h, w, model.in_channels, t.dataset_size, t.data_seed)?)
}

/// Names of the model fields that differ between a checkpoint and the
/// config, other than those in `allowed`.
pub fn lineage_mismatch(ckpt: &ModelConfig, cfg: &ModelConfig, allowed: &[&str]) -> Option<String> {
    let fields: [(&str, String, String); 12] = [
        ("model.depth", ckpt.depth.to_string(), cfg.depth.to_string()),
        ("model.channels", ckpt.channels.to_string(), cfg.channels.to_string()),
        ("model.heads", ckpt.heads.to_string(), cfg.heads.to_string()),
        ("model.patch_size", ckpt.patch_size.to_string(), cfg.patch_size.to_string()),
        ("model.grid", format!("{}x{}", ckpt.grid.0, ckpt.grid.1), format!("{}x{}", cfg.grid.0, cfg.grid.1)),
        ("model.in_channels", ckpt.in_channels.to_string(), cfg.in_channels.to_string()),
        ("model.cond_vocab", ckpt.cond_vocab.to_string(), cfg.cond_vocab.to_string()),
        ("model.cond_dim", ckpt.cond_dim.to_string(), cfg.cond_dim.to_string()),
        ("model.cond_tokens", ckpt.cond_tokens.to_string(), cfg.cond_tokens.to_string()),
        ("model.time_embed_dim", ckpt.time_embed_dim.to_string(), cfg.time_embed_dim.to_string()),
        ("model.mlp_ratio", ckpt.mlp_ratio.to_string(), cfg.mlp_ratio.to_string()),
        ("compress", format!("{:?}", ckpt.compression), format!("{:?}", cfg.compression)),
    ];
    let bad: Vec<String> = fields
        .iter()
        .filter(|(k, a, b)| a != b && !allowed.contains(k))
        .map(|(k, a, b)| format!("{k} is {a} in the checkpoint but {b} in the config"))
        .collect();
    (!bad.is_empty()).then(|| format!("checkpoint lineage mismatch: {}", bad.join("; ")))
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

fn image_name(channels: usize) -> &'static str {
    if channels == 3 {
        "samples.ppm"
    } else {
        "samples.pgm"
    }
}

fn sample_grid(model: &Dit, cfg: &RunConfig, sched: &NoiseSchedule, count: usize, out: &Outputs) -> Result<PathBuf> {
    let mc = model.config();
    let data = dataset(cfg, mc)?;
    let (h, w) = mc.image_size();
    let labels: Vec<usize> = (0..count).flat_map(|i| data.labels(i % data.count)).collect();
    let mut rng = Rng::derive(cfg.seed, Stream::Sample, 0);
    let images = sample(model, sched, &labels, &[count, h, w, mc.in_channels], &mut rng, cfg.schedule.sample_steps, cfg.schedule.sampler)?;
    out.write(image_name(mc.in_channels), encode_grid(&images)?)
}

pub fn train(raw: &RawConfig) -> Result<()> {
    let cfg = raw.resolve()?;
    let sched = schedule(&cfg)?;
    let data = dataset(&cfg, &cfg.model)?;
    let mut state = match &cfg.train.resume {
        Some(path) => {
            let st = Checkpoint::load(path)?.into_state()?;
            if let Some(msg) = lineage_mismatch(st.model.config(), &cfg.model, &[]) {
                return Err(usage(msg));
            }
            if st.seed != cfg.seed {
                return Err(usage(format!("seed is {} in the checkpoint but {} in the config", st.seed, cfg.seed)));
            }
            if st.opt.lr != cfg.train.lr {
                return Err(usage(format!("train.lr is {} in the checkpoint but {} in the config", st.opt.lr, cfg.train.lr)));
            }
            if st.step > cfg.train.steps {
                return Err(usage(format!("checkpoint is at step {}, past train.steps = {}", st.step, cfg.train.steps)));
            }
            st
        }
        None => TrainState::new(Dit::new(cfg.model.clone(), cfg.seed)?, cfg.train.lr, cfg.seed),
    };
    let out = begin(raw, &cfg)?;
    let every = cfg.train.checkpoint_every;
    while state.step < cfg.train.steps {
        let idx = data.step_indices(cfg.seed, state.step, cfg.train.batch_size);
        let (x, labels) = data.batch(&idx)?;
        if let Err(e) = train_step(&mut state, &x, &labels, &sched) {
            out.write("loss.csv", loss_csv(&state.loss_history))?;
            out.metadata("train")?;
            return Err(e.into());
        }
        if every > 0 && state.step % every == 0 {
            Checkpoint::from_state(&state).save(&out.path(&format!("ckpt_{:06}.kvdt", state.step)))?;
        }
        if state.step % 50 == 0 {
            log::info!("step {} loss {:.5}", state.step, state.loss_history.last().unwrap_or(&f64::NAN));
        }
    }
    out.write("loss.csv", loss_csv(&state.loss_history))?;
    Checkpoint::from_state(&state).save(&out.path("final.kvdt"))?;
    if cfg.train.samples > 0 {
        sample_grid(&state.model, &cfg, &sched, cfg.train.samples, &out)?;
    }
    out.metadata("train")?;
    println!("trained to step {}; outputs in {}", state.step, cfg.output_dir.display());
    Ok(())
}

fn write_report(out: &Outputs, report: &ExperimentReport, window: usize) -> Result<()> {
    out.write("report.csv", report.to_csv()?)?;
    out.write("summary.txt", report.summary())?;
    out.write("report.svg", report.to_svg(window))?;
    Ok(())
}

/// Runs one weak-to-strong race from a checkpoint and returns its report.
pub fn finetune(raw: &RawConfig) -> Result<ExperimentReport> {
    let cfg = raw.resolve()?;
    let exp = &cfg.experiment;
    let from = exp.from.as_ref().ok_or_else(|| usage("finetune needs experiment.from (--from CKPT)"))?;
    let base = Checkpoint::load(from)?.into_state()?;
    let base_cfg = base.model.config().clone();
    let allowed: &[&str] = match exp.adapt {
        Adapt::Codec => &[],
        Adapt::Upscale => &["model.grid"],
        Adapt::KvCompress => &["compress"],
    };
    if let Some(msg) = lineage_mismatch(&base_cfg, &cfg.model, allowed) {
        return Err(usage(msg));
    }
    let sched = schedule(&cfg)?;
    let data = dataset(&cfg, &base_cfg)?;
    let identity = LinearCodec::identity(base_cfg.in_channels);
    let env = RaceEnv { data: &data, codec: &identity, schedule: &sched, config: &exp.race };
    let out = begin(raw, &cfg)?;
    let report = match exp.adapt {
        Adapt::Codec => {
            let run = BaseRun::evaluate(base.model, base.loss_history, &env, base.seed)?;
            run_codec_swap(&run, &env, &exp.codec_b, &exp.seeds)?
        }
        Adapt::Upscale => run_upscale(&base.model, &env, cfg.model.grid, &exp.seeds)?,
        Adapt::KvCompress => {
            let spec = match cfg.compress {
                Some(s) if s.op == CompressionOp::Conv => s,
                _ => return Err(usage("kvcompress retrofits a conv operator: set compress.op = conv (--op conv)")),
            };
            run_kv_retrofit(&base.model, &env, spec, &exp.seeds)?
        }
    };
    write_report(&out, &report, exp.race.window)?;
    out.metadata("finetune")?;
    print!("{}", report.summary());
    Ok(report)
}

pub fn sample_cmd(raw: &RawConfig) -> Result<PathBuf> {
    let cfg = raw.resolve()?;
    let from = cfg.sample_from.as_ref().ok_or_else(|| usage("sample needs sample.from (--from CKPT)"))?;
    let state = Checkpoint::load(from)?.into_state()?;
    if cfg.sample_count == 0 {
        return Err(usage("sample.count must be positive"));
    }
    let sched = schedule(&cfg)?;
    let out = begin(raw, &cfg)?;
    let path = sample_grid(&state.model, &cfg, &sched, cfg.sample_count, &out)?;
    out.metadata("sample")?;
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn bench(raw: &RawConfig) -> Result<()> {
    let cfg = raw.resolve()?;
    let out = begin(raw, &cfg)?;
    let result = sweep(&cfg.bench)?;
    for s in &result.skipped {
        eprintln!("skipped: {s}");
    }
    out.write("bench.csv", result.to_csv()?)?;
    let mut series: Vec<Series> = Vec::new();
    for row in result.rows.iter().filter(|r| r.r > 1) {
        let name = format!("{} R={}", row.operator, row.r);
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((row.n as f64, row.speedup_measured)),
            None => series.push(Series { name, points: vec![(row.n as f64, row.speedup_measured)] }),
        }
    }
    out.write("bench.svg", line_chart("attention forward speedup vs dense", "tokens N", "speedup", &series, false))?;
    out.metadata("bench")?;
    print!("{}", result.to_csv()?);
    Ok(())
}

pub fn stats(raw: &RawConfig) -> Result<CorpusStats> {
    let cfg = raw.resolve()?;
    let corpus = cfg.stats_corpus.as_ref().ok_or_else(|| usage("stats needs a corpus file"))?;
    let bytes = std::fs::read(corpus).at(corpus)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::Io {
        path: corpus.clone(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    let s = CorpusStats::from_text(&text);
    let out = begin(raw, &cfg)?;
    out.write("stats.csv", s.summary_csv())?;
    out.write("stats_histogram.csv", s.histogram_csv())?;
    out.metadata("stats")?;
    print!("{}", s.summary_csv());
    Ok(s)
}

/// Gradient check of the full model once per configured operator.
/// Returns `(operator, max relative error)` pairs.
pub fn checkgrad(raw: &RawConfig) -> Result<Vec<(CompressionOp, f64)>> {
    let cfg = raw.resolve()?;
    let cg = &cfg.checkgrad;
    let (gh, gw) = cfg.model.grid;
    if gh > 8 || gw > 8 {
        return Err(usage(format!("checkgrad needs a patch grid of at most 8x8, model.grid is {gh}x{gw}")));
    }
    if cg.ops.is_empty() || cg.batch == 0 {
        return Err(usage("checkgrad needs at least one operator and a positive batch"));
    }
    let out = begin(raw, &cfg)?;
    let opts = GradCheckOptions {
        eps: cg.eps,
        max_coords_per_tensor: (cg.coords > 0).then_some(cg.coords),
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    let mut csv = String::from("operator,tensor,checked,max_rel_error\n");
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &op in &cg.ops {
        let mut mc = cfg.model.clone();
        mc.compression = vec![CompressionSpec::new(op, cg.stride, cfg.compress_layers)];
        let mut model = Dit::new(mc.clone(), cfg.seed)?;
        model.perturb(cg.perturb, cfg.seed);
        if cg.fault {
            model.set_fault(Some(kvdit::backbone::BackwardFault::MlpWeightScale));
        }
        let mut rng = Rng::derive(cfg.seed, Stream::Misc, 1);
        let (h, w) = mc.image_size();
        let x = Tensor::randn(&[cg.batch, h, w, mc.in_channels], 1.0, &mut rng);
        let t: Vec<usize> = (0..cg.batch).map(|_| rng.range_inclusive(1, cfg.schedule.steps)).collect();
        let labels: Vec<usize> = (0..cg.batch * mc.cond_tokens).map(|_| rng.below(mc.cond_vocab)).collect();
        let target = Tensor::randn(x.shape(), 1.0, &mut rng);
        let report = model.check_gradients(&x, &t, &labels, &target, &opts)?;
        for e in &report.tensors {
            let _ = writeln!(csv, "{op},{},{},{:e}", e.name, e.checked, e.max_rel_error);
        }
        let err = report.max_rel_error();
        let ok = report.passes(cg.tolerance);
        println!("{op}: max relative error {err:.3e} over {} tensors: {}", report.tensors.len(), if ok { "pass" } else { "FAIL" });
        if !ok {
            let worst: Vec<String> = report.worst(3).iter().map(|e| format!("{} ({:.3e})", e.name, e.max_rel_error)).collect();
            println!("  worst tensors: {}", worst.join(", "));
            failures.push(format!("{op}: {}", worst.join(", ")));
        }
        results.push((op, err));
    }
    out.write("checkgrad.csv", csv)?;
    out.metadata("checkgrad")?;
    if !failures.is_empty() {
        return Err(kvdit::Error::Numerical(format!(
            "gradient check above {:e}: {}",
            cg.tolerance,
            failures.join("; ")
        ))
        .into());
    }
    Ok(results)
}
