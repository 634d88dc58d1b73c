//! Diffusion training and sampling utilities built around zero terminal SNR.
//!
//! The crate covers discrete VP noise schedules and their VE sigma view,
//! the v-prediction Karras preconditioner (including the analytic
//! infinite-noise first sampling step), a small trainable denoiser used to
//! exercise those pieces end to end, aspect-ratio bucketing for batch
//! generation, and Welford per-channel latent statistics.

pub mod bucketing;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod fmt;
pub mod network;
pub mod plot;
pub mod precond;
pub mod sampler;
pub mod schedule;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::ToyNetwork;
pub use precond::{Preconditioner, RawNetwork, Scalings};
pub use sampler::{sample, SamplerConfig};
pub use schedule::{NoiseSchedule, SigmaSchedule};
pub use stats::ChannelStats;
pub use tensor::Tensor;
