//! Epsilon-prediction diffusion: noise schedule, forward noising, training
//! step with Adam, and an ancestral sampler.

mod optim;
mod sample;
mod schedule;
mod train;

pub use optim::Adam;
pub use sample::{sample, timestep_subset, NoisePredictor, SamplerKind};
pub use schedule::{linear_schedule, q_sample, NoiseSchedule};
pub use train::{probe_loss, train_step, ProbeBatch, TrainState};
