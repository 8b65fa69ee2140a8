//! Weak-to-strong adaptation races.
//!
//! Each experiment starts from a trained base model, applies one structural
//! change (new latent codec, larger patch grid, added KV compression) and
//! races an adapted initialisation against a naive one. Both arms of a race
//! see the same data order and the same timestep/noise draws; only the
//! initial weights differ.

mod codec;
mod race;
mod report;

pub use codec::LinearCodec;
pub use race::{
    make_probe, run_codec_swap, run_kv_retrofit, run_upscale, steps_to_threshold, train_arm, train_base, BaseRun,
    RaceConfig, RaceEnv,
};
pub use report::{Arm, Experiment, ExperimentReport, SeedOutcome};
