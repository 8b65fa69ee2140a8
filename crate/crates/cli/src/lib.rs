//! Command-line front end for `kvdit`.
//!
//! Flags are sugar for config keys: each one is written into the key set
//! before it is resolved, so `resolved.cfg` records the whole run. Layering
//! is defaults, then `--config`, then `--set KEY=VALUE`, then flags.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod image;
pub mod stats;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::{CliError, Result};

use config::RawConfig;

#[derive(Debug, Parser)]
#[command(name = "kvdit", version, about = "KV-compressed diffusion transformer experiments")]
pub struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (`output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Compute threads; only 1 is supported.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override any config key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from scratch or resume from a checkpoint.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Weak-to-strong race from a trained checkpoint.
    Finetune {
        #[arg(long, value_name = "CKPT")]
        from: Option<PathBuf>,
        /// codec | upscale | kvcompress
        #[arg(long)]
        adapt: Option<String>,
        /// identity | perm:i,j,k
        #[arg(long = "codec-b")]
        codec_b: Option<String>,
        /// Target patch grid for upscale, e.g. 16x16.
        #[arg(long)]
        grid: Option<String>,
        /// Compression operator for kvcompress.
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        /// Comma-separated race seeds.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long, value_name = "CKPT")]
        from: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Attention wall-clock sweep with FLOP accounting.
    Bench {
        #[arg(long = "Ns")]
        ns: Option<String>,
        #[arg(long = "Rs")]
        rs: Option<String>,
        #[arg(long)]
        ops: Option<String>,
    },
    /// Caption-length statistics of a text corpus (one caption per line).
    Stats { corpus: Option<PathBuf> },
    /// Finite-difference gradient check of the full model.
    Checkgrad {
        /// Inject a known backward bug (mlp_weight_scale).
        #[arg(long)]
        fault: Option<String>,
    },
}

fn path_str(p: &std::path::Path) -> String {
    p.display().to_string()
}

/// Layers the config sources for `cli` into one key set.
pub fn build_config(cli: &Cli) -> Result<RawConfig> {
    let mut raw = match &cli.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        raw.set(k.trim(), v.trim())?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(s) = cli.seed {
        flags.push(("seed", s.to_string()));
    }
    if let Some(o) = &cli.out {
        flags.push(("output_dir", path_str(o)));
    }
    if let Some(t) = cli.threads {
        flags.push(("threads", t.to_string()));
    }
    match &cli.command {
        Command::Train { steps, resume } => {
            flags.extend(steps.map(|s| ("train.steps", s.to_string())));
            flags.extend(resume.as_deref().map(|p| ("train.resume", path_str(p))));
        }
        Command::Finetune { from, adapt, codec_b, grid, op, stride, budget, seeds } => {
            flags.extend(from.as_deref().map(|p| ("experiment.from", path_str(p))));
            flags.extend(adapt.clone().map(|v| ("experiment.adapt", v)));
            flags.extend(codec_b.clone().map(|v| ("experiment.codec_b", v)));
            flags.extend(grid.clone().map(|v| ("model.grid", v)));
            flags.extend(op.clone().map(|v| ("compress.op", v)));
            flags.extend(stride.map(|v| ("compress.stride", v.to_string())));
            flags.extend(budget.map(|v| ("experiment.budget", v.to_string())));
            flags.extend(seeds.clone().map(|v| ("experiment.seeds", v)));
        }
        Command::Sample { from, count } => {
            flags.extend(from.as_deref().map(|p| ("sample.from", path_str(p))));
            flags.extend(count.map(|v| ("sample.count", v.to_string())));
        }
        Command::Bench { ns, rs, ops } => {
            flags.extend(ns.clone().map(|v| ("bench.ns", v)));
            flags.extend(rs.clone().map(|v| ("bench.rs", v)));
            flags.extend(ops.clone().map(|v| ("bench.ops", v)));
        }
        Command::Stats { corpus } => flags.extend(corpus.as_deref().map(|p| ("stats.corpus", path_str(p)))),
        Command::Checkgrad { fault } => flags.extend(fault.clone().map(|v| ("checkgrad.fault", v))),
    }
    for (k, v) in flags {
        raw.set(k, &v)?;
    }
    Ok(raw)
}

pub fn run(cli: &Cli) -> Result<()> {
    let raw = build_config(cli)?;
    match cli.command {
        Command::Train { .. } => commands::train(&raw),
        Command::Finetune { .. } => commands::finetune(&raw).map(|_| ()),
        Command::Sample { .. } => commands::sample_cmd(&raw).map(|_| ()),
        Command::Bench { .. } => commands::bench(&raw),
        Command::Stats { .. } => commands::stats(&raw).map(|_| ()),
        Command::Checkgrad { .. } => commands::checkgrad(&raw).map(|_| ()),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
