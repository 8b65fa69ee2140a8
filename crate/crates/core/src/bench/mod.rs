//! FLOP accounting and wall-clock measurement of compressed attention.
//!
//! The timed kernel is a single-threaded f32 forward pass (QKV projection,
//! KV compression, chunked scaled dot-product attention, output
//! projection). Records report the median of the timed repeats, never the
//! mean.

mod cost;
mod kernel;
mod sweep;

pub use cost::{flops_attention, flops_attention_grid, CostModel, CostTerms};
pub use kernel::{attention_forward_f32, F32Weights};
pub use sweep::{
    bench_attention, bench_attention_grid, parse_csv, percentile, sweep, timer_resolution, BenchRecord, BenchRow,
    SweepConfig, SweepResult, CSV_HEADER,
};
