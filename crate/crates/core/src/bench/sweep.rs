use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::cost::{flops_attention_grid, CostModel};
use super::kernel::{attention_forward_f32, F32Weights};
use crate::error::{bail, Error, Result};
use crate::kvattn::CompressionOp;
use crate::numerics::{Rng, Stream};

pub const CSV_HEADER: [&str; 12] = [
    "N",
    "R",
    "operator",
    "dtype",
    "threads",
    "flops_total",
    "flops_ratio_vs_dense",
    "median_ms",
    "p10_ms",
    "p90_ms",
    "speedup_measured",
    "reliable",
];

/// The timed kernel runs on one thread.
const THREADS: usize = 1;
const MIN_TICKS: f64 = 20.0;

/// One timed cell.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub n: usize,
    pub grid: (usize, usize),
    pub stride: usize,
    pub op: CompressionOp,
    pub channels: usize,
    pub heads: usize,
    pub repeats: usize,
    pub warmups: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub dtype: &'static str,
    pub threads: usize,
    pub reliable: bool,
    pub notes: Vec<String>,
}

/// One CSV line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub operator: String,
    pub dtype: String,
    pub threads: usize,
    pub flops_total: u64,
    pub flops_ratio_vs_dense: f64,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub speedup_measured: f64,
    pub reliable: bool,
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

/// Nearest-rank percentile of an ascending slice, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Times the forward pass on a square grid of `n` tokens.
pub fn bench_attention(n: usize, c: usize, heads: usize, stride: usize, op: CompressionOp, repeats: usize, warmups: usize) -> Result<BenchRecord> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        bail!(Layout, "{n} tokens do not form a square grid");
    }
    bench_attention_grid((side, side), c, heads, stride, op, repeats, warmups, 256, 0)
}

/// Times the forward pass on an `h x w` grid: `warmups` untimed runs, then
/// `repeats` timed ones on seed-fixed inputs.
#[allow(clippy::too_many_arguments)]
pub fn bench_attention_grid(
    grid: (usize, usize),
    c: usize,
    heads: usize,
    stride: usize,
    op: CompressionOp,
    repeats: usize,
    warmups: usize,
    chunk: usize,
    seed: u64,
) -> Result<BenchRecord> {
    if repeats < 5 || warmups < 2 {
        bail!(Config, "need at least 5 repeats after 2 warmups, got {repeats} and {warmups}");
    }
    // Validates the geometry.
    flops_attention_grid(grid.0, grid.1, c, heads, stride, op)?;
    let (h, w) = grid;
    let mut rng = Rng::derive(seed, Stream::Bench, (h * w) as u64);
    let wts = F32Weights::random(c, stride, &mut rng);
    let x: Vec<f32> = (0..h * w * c).map(|_| rng.normal() as f32).collect();
    let mut sink = 0.0f32;
    for _ in 0..warmups {
        sink += attention_forward_f32(&x, h, w, heads, stride, op, &wts, chunk)[0];
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let y = attention_forward_f32(&x, h, w, heads, stride, op, &wts, chunk);
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        sink += y[0];
    }
    std::hint::black_box(sink);
    times.sort_by(f64::total_cmp);
    let med = median(&times);
    let tick_ms = timer_resolution().as_secs_f64() * 1e3;
    let mut notes = Vec::new();
    let reliable = med >= MIN_TICKS * tick_ms;
    if !reliable {
        notes.push(format!("median {med:.6} ms is under {MIN_TICKS} timer ticks of {tick_ms:.6} ms"));
    }
    Ok(BenchRecord {
        n: h * w,
        grid,
        stride,
        op,
        channels: c,
        heads,
        repeats,
        warmups,
        median_ms: med,
        p10_ms: percentile(&times, 0.1),
        p90_ms: percentile(&times, 0.9),
        dtype: "f32",
        threads: THREADS,
        reliable,
        notes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Token counts; each must be a perfect square.
    pub ns: Vec<usize>,
    pub rs: Vec<usize>,
    pub ops: Vec<CompressionOp>,
    pub channels: usize,
    pub heads: usize,
    pub repeats: usize,
    pub warmups: usize,
    /// Query rows per score block.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ns: vec![1024, 4096, 16384],
            rs: vec![1, 2, 4],
            ops: vec![CompressionOp::Pool, CompressionOp::Conv],
            channels: 64,
            heads: 4,
            repeats: 5,
            warmups: 2,
            chunk: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub records: Vec<BenchRecord>,
    pub costs: Vec<CostModel>,
    pub rows: Vec<BenchRow>,
    /// Dense median per N, the denominator of `speedup_measured`.
    pub baselines: Vec<(usize, f64)>,
    pub skipped: Vec<String>,
}

impl SweepResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Parses a sweep CSV; the header must match [`CSV_HEADER`].
pub fn parse_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER) {
        bail!(Config, "unexpected bench CSV header {header:?}");
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Times every `(N, R, operator)` cell. Invalid cells are skipped and
/// logged. Each N also gets an untabulated dense baseline run.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    let mut out = SweepResult::default();
    let mut ns = cfg.ns.clone();
    ns.sort_unstable();
    ns.dedup();
    if cfg.rs.is_empty() || cfg.ops.is_empty() {
        return Ok(out);
    }
    for &n in &ns {
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            let msg = format!("N={n}: not a square grid");
            log::warn!("skipping {msg}");
            out.skipped.push(msg);
            continue;
        }
        let mut baseline: Option<(f64, u64)> = None;
        for &r in &cfg.rs {
            for &op in &cfg.ops {
                let cost = match flops_attention_grid(side, side, cfg.channels, cfg.heads, r, op) {
                    Ok(c) => c,
                    Err(e) => {
                        let msg = format!("N={n} R={r} {op}: {e}");
                        log::warn!("skipping {msg}");
                        out.skipped.push(msg);
                        continue;
                    }
                };
                let (base_ms, base_flops) = match baseline {
                    Some(b) => b,
                    None => {
                        let rec = bench_attention_grid((side, side), cfg.channels, cfg.heads, 1, CompressionOp::None, cfg.repeats, cfg.warmups, cfg.chunk, cfg.seed)?;
                        let dense = flops_attention_grid(side, side, cfg.channels, cfg.heads, 1, CompressionOp::None)?;
                        out.baselines.push((n, rec.median_ms));
                        *baseline.insert((rec.median_ms, dense.total()))
                    }
                };
                let mut rec = bench_attention_grid((side, side), cfg.channels, cfg.heads, r, op, cfg.repeats, cfg.warmups, cfg.chunk, cfg.seed)?;
                let predicted = base_flops as f64 / cost.total() as f64;
                let measured = base_ms / rec.median_ms;
                if measured > 1.1 * predicted {
                    rec.reliable = false;
                    rec.notes.push(format!("measured speedup {measured:.3} exceeds FLOP prediction {predicted:.3} by over 10%"));
                }
                out.rows.push(BenchRow {
                    n,
                    r,
                    operator: op.to_string(),
                    dtype: rec.dtype.to_string(),
                    threads: rec.threads,
                    flops_total: cost.total(),
                    flops_ratio_vs_dense: predicted,
                    median_ms: rec.median_ms,
                    p10_ms: rec.p10_ms,
                    p90_ms: rec.p90_ms,
                    speedup_measured: measured,
                    reliable: rec.reliable,
                });
                out.costs.push(cost);
                out.records.push(rec);
            }
        }
    }
    flag_non_monotone(&mut out);
    for rec in &out.records {
        for note in &rec.notes {
            log::warn!("N={} R={} {}: {note}", rec.n, rec.stride, rec.op);
        }
    }
    Ok(out)
}

/// For fixed `(R, operator)`, median time must strictly grow with N.
fn flag_non_monotone(out: &mut SweepResult) {
    for i in 0..out.records.len() {
        let prev = (0..i)
            .rev()
            .find(|&j| out.records[j].stride == out.records[i].stride && out.records[j].op == out.records[i].op);
        if let Some(j) = prev {
            if out.records[i].median_ms <= out.records[j].median_ms {
                let msg = format!("median {:.4} ms does not exceed {:.4} ms at N={}", out.records[i].median_ms, out.records[j].median_ms, out.records[j].n);
                out.records[i].reliable = false;
                out.records[i].notes.push(msg);
                out.rows[i].reliable = false;
            }
        }
    }
}
