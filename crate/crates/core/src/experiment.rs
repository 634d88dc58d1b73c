//! Paired mean-leakage experiment: the same toy denoiser trained with and
//! without a zero-terminal-SNR schedule, then sampled from pure noise.
//!
//! Without ZTSNR the most noisy training step still carries signal, so the
//! model learns to read the data mean out of its input. Starting inference
//! from zero-mean noise then drags samples toward 0.

use crate::error::Result;
use crate::precond::Preconditioner;
use crate::sampler::{sample_batch, Conditioning, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::train::{train_toy, LrSchedule, Optimizer, SampleSet, TrainConfig};

#[derive(Debug, Clone)]
pub struct LeakageConfig {
    pub data_mean: Vec<f64>,
    /// Per-dimension std of the training cluster.
    pub data_std: f64,
    pub data_size: usize,
    pub train: TrainConfig,
    pub sigma_data: f64,
    pub inference_steps: usize,
    pub num_samples: usize,
}

impl Default for LeakageConfig {
    fn default() -> Self {
        Self {
            data_mean: vec![3.0, -2.0],
            data_std: 3.0,
            data_size: 4096,
            train: TrainConfig {
                steps: 6000,
                batch_size: 64,
                learning_rate: 0.003,
                optimizer: Optimizer::adam(),
                lr_schedule: LrSchedule::Cosine,
                ..TrainConfig::default()
            },
            sigma_data: 1.0,
            inference_steps: 28,
            num_samples: 4000,
        }
    }
}

/// Outcome of one arm of the experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub sample_mean: Vec<f64>,
    /// `|sample_mean - data_mean| / |data_mean|`.
    pub relative_error: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageResult {
    pub seed: u64,
    pub ztsnr: ArmResult,
    pub no_ztsnr: ArmResult,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mean_of(samples: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; samples[0].len()];
    for s in samples {
        m.iter_mut().zip(s).for_each(|(a, v)| *a += v);
    }
    m.iter_mut().for_each(|a| *a /= samples.len() as f64);
    m
}

/// Trains on `schedule`, then samples `num_samples` points. ZTSNR runs use
/// the analytic first step from the terminal clamp; others start from
/// `sigma_max * n`.
pub fn run_arm(cfg: &LeakageConfig, data: &SampleSet, schedule: NoiseSchedule, seed: u64) -> Result<ArmResult> {
    let precond = Preconditioner::new(cfg.sigma_data)?;
    let ztsnr = schedule.is_ztsnr();
    let train_cfg = TrainConfig { schedule: schedule.clone(), seed, ..cfg.train.clone() };
    let trained = train_toy(&train_cfg, data, &precond)?;
    let sigmas = schedule
        .sigma_view(cfg.train.terminal_clamp)?
        .inference_sigmas(cfg.inference_steps)?;
    let sampler = SamplerConfig::new(sigmas, ztsnr, 1.0, seed.wrapping_add(0x5eed))?;
    let samples = sample_batch(
        &sampler,
        &precond,
        &trained.network,
        data.dim(),
        cfg.num_samples,
        Conditioning::default(),
    )?;
    let sample_mean = mean_of(&samples);
    let diff: Vec<f64> = sample_mean.iter().zip(&cfg.data_mean).map(|(a, b)| a - b).collect();
    Ok(ArmResult {
        relative_error: norm(&diff) / norm(&cfg.data_mean),
        sample_mean,
        final_loss: trained.losses.last().copied().unwrap_or(f64::NAN),
    })
}

/// Runs both arms on the same data and seed.
pub fn run_leakage_experiment(cfg: &LeakageConfig, seed: u64) -> Result<LeakageResult> {
    let data = SampleSet::gaussian_cluster(&cfg.data_mean, cfg.data_std, cfg.data_size, seed)?;
    let base = cfg.train.schedule.clone();
    let with = if base.is_ztsnr() { base.clone() } else { base.rescale_to_ztsnr()? };
    let without = if base.is_ztsnr() { NoiseSchedule::sdxl() } else { base };
    Ok(LeakageResult {
        seed,
        ztsnr: run_arm(cfg, &data, with, seed)?,
        no_ztsnr: run_arm(cfg, &data, without, seed)?,
    })
}
