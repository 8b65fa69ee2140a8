//! Flat `section.key = value` run configuration.
//!
//! Every key has a default, so a config file only lists what it changes.
//! Unknown keys and duplicate keys are usage errors. A run writes the fully
//! resolved key set (`resolved.cfg`) beside its outputs; feeding that file
//! back in reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kvdit::bench::SweepConfig;
use kvdit::data::Generator;
use kvdit::diffusion::SamplerKind;
use kvdit::kvattn::{CompressionOp, CompressionSpec, LayerPreset};
use kvdit::w2s::{LinearCodec, RaceConfig};
use kvdit::ModelConfig;

use crate::error::{usage, IoContext, Result};

/// Recognised keys and their defaults, in the order `resolved.cfg` lists them.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("output_dir", "out"),
    ("threads", "1"),
    ("model.depth", "4"),
    ("model.channels", "32"),
    ("model.heads", "2"),
    ("model.patch_size", "2"),
    ("model.grid", "8x8"),
    ("model.in_channels", "3"),
    ("model.cond_vocab", "16"),
    ("model.cond_dim", "16"),
    ("model.cond_tokens", "4"),
    ("model.time_embed_dim", "32"),
    ("model.mlp_ratio", "4"),
    ("compress.op", "none"),
    ("compress.stride", "2"),
    ("compress.layers", "deep"),
    ("schedule.steps", "1000"),
    ("schedule.beta_start", "0.0001"),
    ("schedule.beta_end", "0.02"),
    ("schedule.sampler", "ancestral"),
    ("schedule.sample_steps", "50"),
    ("train.steps", "600"),
    ("train.batch_size", "16"),
    ("train.lr", "0.001"),
    ("train.checkpoint_every", "100"),
    ("train.dataset", "gaussian_blobs"),
    ("train.dataset_size", "512"),
    ("train.data_seed", "0"),
    ("train.samples", "16"),
    ("train.resume", ""),
    ("experiment.from", ""),
    ("experiment.adapt", "codec"),
    ("experiment.codec_b", "perm:2,0,1"),
    ("experiment.seeds", "1,2,3"),
    ("experiment.budget", "2000"),
    ("experiment.lr", "0.0002"),
    ("experiment.window", "50"),
    ("experiment.probe_size", "256"),
    ("experiment.probe_steps", "0,100"),
    ("experiment.probe_batches", "4"),
    ("experiment.threshold_factor", "1.2"),
    ("experiment.max_step_ratio", "0.5"),
    ("experiment.compare_step", "100"),
    ("experiment.random_pe_std", "0.02"),
    ("sample.from", ""),
    ("sample.count", "16"),
    ("stats.corpus", ""),
    ("bench.ns", "1024,4096,16384"),
    ("bench.rs", "1,2,4"),
    ("bench.ops", "pool,conv"),
    ("bench.channels", "64"),
    ("bench.heads", "4"),
    ("bench.repeats", "5"),
    ("bench.warmups", "2"),
    ("bench.chunk", "256"),
    ("checkgrad.ops", "discard,pool,conv"),
    ("checkgrad.stride", "2"),
    ("checkgrad.batch", "2"),
    ("checkgrad.coords", "6"),
    ("checkgrad.eps", "0.000001"),
    ("checkgrad.tolerance", "0.0001"),
    ("checkgrad.perturb", "0.1"),
    ("checkgrad.fault", "none"),
];

/// Untyped key/value view of a configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        let values = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Self { values }
    }
}

impl RawConfig {
    /// Defaults overlaid with the entries of `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies `key = value` lines. Blank lines and lines starting with `#`
    /// are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!("{origin}:{}: expected `key = value`, got {line:?}", i + 1)));
            };
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), i + 1) {
                return Err(usage(format!("{origin}:{}: key {k} already set on line {prev}", i + 1)));
            }
            self.set(k, v.trim()).map_err(|e| usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(usage(format!("unknown config key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    /// All keys, one per line, in [`DEFAULTS`] order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _) in DEFAULTS {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::from_raw(self)
    }
}

/// Which weak-to-strong procedure `finetune` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adapt {
    Codec,
    Upscale,
    KvCompress,
}

impl FromStr for Adapt {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "codec" => Ok(Self::Codec),
            "upscale" => Ok(Self::Upscale),
            "kvcompress" => Ok(Self::KvCompress),
            _ => Err("expected codec|upscale|kvcompress".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
    pub dataset: Generator,
    pub dataset_size: usize,
    pub data_seed: u64,
    pub samples: usize,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler: SamplerKind,
    pub sample_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub from: Option<PathBuf>,
    pub adapt: Adapt,
    pub codec_b: LinearCodec,
    pub seeds: Vec<u64>,
    pub race: RaceConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckgradConfig {
    pub ops: Vec<CompressionOp>,
    pub stride: usize,
    pub batch: usize,
    pub coords: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub perturb: f64,
    pub fault: bool,
}

/// Fully typed configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub model: ModelConfig,
    /// The `compress.*` spec, before it is folded into `model`.
    pub compress: Option<CompressionSpec>,
    /// `compress.layers` resolved against `model.depth`.
    pub compress_layers: (usize, usize),
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub sample_from: Option<PathBuf>,
    pub sample_count: usize,
    pub stats_corpus: Option<PathBuf>,
    pub bench: SweepConfig,
    pub checkgrad: CheckgradConfig,
}

fn parse<T: FromStr>(raw: &RawConfig, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = raw.get(key);
    v.parse().map_err(|e| usage(format!("{key} = {v:?}: {e}")))
}

fn parse_list<T: FromStr>(raw: &RawConfig, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let v = raw.get(key);
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| usage(format!("{key} = {v:?}: {s:?}: {e}"))))
        .collect()
}

fn parse_path(raw: &RawConfig, key: &str) -> Option<PathBuf> {
    let v = raw.get(key);
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// `HxW`, e.g. `8x8`.
pub fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    Ok((h, w))
}

/// A preset name or an inclusive 1-based block range `a-b`.
fn parse_layers(s: &str, depth: usize) -> std::result::Result<(usize, usize), String> {
    if let Some((a, b)) = s.split_once('-') {
        let a = a.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        let b = b.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        return Ok((a, b));
    }
    s.parse::<LayerPreset>().map(|p| p.range(depth)).map_err(|e| e.to_string())
}

/// `identity` or `perm:i,j,k` (output channel `c` takes input channel
/// `perm[c]`).
pub fn parse_codec(s: &str, channels: usize) -> std::result::Result<LinearCodec, String> {
    if s == "identity" {
        return Ok(LinearCodec::identity(channels));
    }
    let Some(list) = s.strip_prefix("perm:") else {
        return Err(format!("expected identity or perm:i,j,..., got {s:?}"));
    };
    let perm = list.split(',').map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| format!("{s:?}: {e}"))?;
    if perm.len() != channels {
        return Err(format!("{s:?} permutes {} channels, model has {channels}", perm.len()));
    }
    LinearCodec::permutation(&perm).map_err(|e| e.to_string())
}

fn layer_range(raw: &RawConfig, depth: usize) -> Result<(usize, usize)> {
    parse_layers(raw.get("compress.layers"), depth).map_err(|e| usage(format!("compress.layers: {e}")))
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut model = ModelConfig {
            depth: parse(raw, "model.depth")?,
            channels: parse(raw, "model.channels")?,
            heads: parse(raw, "model.heads")?,
            patch_size: parse(raw, "model.patch_size")?,
            grid: parse_grid(raw.get("model.grid")).map_err(|e| usage(format!("model.grid: {e}")))?,
            in_channels: parse(raw, "model.in_channels")?,
            cond_vocab: parse(raw, "model.cond_vocab")?,
            cond_dim: parse(raw, "model.cond_dim")?,
            cond_tokens: parse(raw, "model.cond_tokens")?,
            time_embed_dim: parse(raw, "model.time_embed_dim")?,
            mlp_ratio: parse(raw, "model.mlp_ratio")?,
            compression: Vec::new(),
        };
        let op: CompressionOp = parse(raw, "compress.op")?;
        let stride: usize = parse(raw, "compress.stride")?;
        let range = layer_range(raw, model.depth)?;
        let compress = (op != CompressionOp::None).then(|| CompressionSpec::new(op, stride, range));
        model.compression = compress.into_iter().collect();
        model.validate()?;

        let sampler = match raw.get("schedule.sampler") {
            "ancestral" => SamplerKind::Ancestral,
            "deterministic" => SamplerKind::Deterministic,
            s => return Err(usage(format!("schedule.sampler = {s:?}: expected ancestral|deterministic"))),
        };
        let schedule = ScheduleConfig {
            steps: parse(raw, "schedule.steps")?,
            beta_start: parse(raw, "schedule.beta_start")?,
            beta_end: parse(raw, "schedule.beta_end")?,
            sampler,
            sample_steps: parse(raw, "schedule.sample_steps")?,
        };
        let train = TrainConfig {
            steps: parse(raw, "train.steps")?,
            batch_size: parse(raw, "train.batch_size")?,
            lr: parse(raw, "train.lr")?,
            checkpoint_every: parse(raw, "train.checkpoint_every")?,
            dataset: parse(raw, "train.dataset")?,
            dataset_size: parse(raw, "train.dataset_size")?,
            data_seed: parse(raw, "train.data_seed")?,
            samples: parse(raw, "train.samples")?,
            resume: parse_path(raw, "train.resume"),
        };
        if train.batch_size == 0 {
            return Err(usage("train.batch_size must be positive"));
        }
        let race = RaceConfig {
            budget: parse(raw, "experiment.budget")?,
            batch_size: train.batch_size,
            lr: parse(raw, "experiment.lr")?,
            window: parse(raw, "experiment.window")?,
            probe_size: parse(raw, "experiment.probe_size")?,
            probe_steps: parse_list(raw, "experiment.probe_steps")?,
            threshold_factor: parse(raw, "experiment.threshold_factor")?,
            max_step_ratio: parse(raw, "experiment.max_step_ratio")?,
            compare_step: parse(raw, "experiment.compare_step")?,
            probe_batches: parse(raw, "experiment.probe_batches")?,
            random_pe_std: parse(raw, "experiment.random_pe_std")?,
        };
        let experiment = ExperimentConfig {
            from: parse_path(raw, "experiment.from"),
            adapt: parse(raw, "experiment.adapt")?,
            codec_b: parse_codec(raw.get("experiment.codec_b"), model.in_channels)
                .map_err(|e| usage(format!("experiment.codec_b: {e}")))?,
            seeds: parse_list(raw, "experiment.seeds")?,
            race,
        };
        if experiment.seeds.is_empty() {
            return Err(usage("experiment.seeds is empty"));
        }
        let bench = SweepConfig {
            ns: parse_list(raw, "bench.ns")?,
            rs: parse_list(raw, "bench.rs")?,
            ops: parse_list(raw, "bench.ops")?,
            channels: parse(raw, "bench.channels")?,
            heads: parse(raw, "bench.heads")?,
            repeats: parse(raw, "bench.repeats")?,
            warmups: parse(raw, "bench.warmups")?,
            chunk: parse(raw, "bench.chunk")?,
            seed: parse(raw, "seed")?,
        };
        let fault = match raw.get("checkgrad.fault") {
            "none" => false,
            "mlp_weight_scale" => true,
            s => return Err(usage(format!("checkgrad.fault = {s:?}: expected none|mlp_weight_scale"))),
        };
        let checkgrad = CheckgradConfig {
            ops: parse_list(raw, "checkgrad.ops")?,
            stride: parse(raw, "checkgrad.stride")?,
            batch: parse(raw, "checkgrad.batch")?,
            coords: parse(raw, "checkgrad.coords")?,
            eps: parse(raw, "checkgrad.eps")?,
            tolerance: parse(raw, "checkgrad.tolerance")?,
            perturb: parse(raw, "checkgrad.perturb")?,
            fault,
        };
        let threads: usize = parse(raw, "threads")?;
        if threads != 1 {
            return Err(usage(format!("threads = {threads}: compute is single-threaded, only 1 is supported")));
        }
        Ok(Self {
            seed: parse(raw, "seed")?,
            output_dir: PathBuf::from(raw.get("output_dir")),
            threads,
            model,
            compress,
            compress_layers: range,
            schedule,
            train,
            experiment,
            sample_from: parse_path(raw, "sample.from"),
            sample_count: parse(raw, "sample.count")?,
            stats_corpus: parse_path(raw, "stats.corpus"),
            bench,
            checkgrad,
        })
    }
}
