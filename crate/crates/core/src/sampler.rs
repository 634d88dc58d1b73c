//! Euler sampling over a sigma schedule, with the analytic infinite-noise
//! first step and classifier-free guidance on denoised estimates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::precond::{Preconditioner, RawNetwork};
use crate::schedule::SigmaSchedule;

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    sigmas: SigmaSchedule,
    ztsnr_first_step: bool,
    cfg_scale: f64,
    seed: u64,
}

impl SamplerConfig {
    /// `sigmas` must be an inference schedule (ending in the `0` marker).
    /// The analytic first step is only valid for a zero-terminal-SNR
    /// schedule whose first sigma is the terminal clamp.
    pub fn new(sigmas: SigmaSchedule, ztsnr_first_step: bool, cfg_scale: f64, seed: u64) -> Result<Self> {
        if !sigmas.ends_at_zero() {
            return Err(Error::param("sampling schedule must end with the zero marker"));
        }
        if ztsnr_first_step && !(sigmas.is_ztsnr() && sigmas.max_sigma() == sigmas.terminal_clamp()) {
            return Err(Error::param(
                "ztsnr_first_step requires a zero-terminal-SNR schedule starting at the terminal clamp",
            ));
        }
        if !(cfg_scale >= 1.0 && cfg_scale.is_finite()) {
            return Err(Error::param(format!("cfg_scale must be >= 1, got {cfg_scale}")));
        }
        Ok(Self { sigmas, ztsnr_first_step, cfg_scale, seed })
    }

    pub fn sigmas(&self) -> &SigmaSchedule {
        &self.sigmas
    }

    pub fn ztsnr_first_step(&self) -> bool {
        self.ztsnr_first_step
    }

    pub fn cfg_scale(&self) -> f64 {
        self.cfg_scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Conditioning for one sampling run.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditioning<'a> {
    pub cond: Option<&'a [f64]>,
    pub uncond: Option<&'a [f64]>,
}

/// One recorded denoised estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub sigma: f64,
    pub denoised: Vec<f64>,
}

/// `x + (sigma_to - sigma_from) * (x - d) / sigma_from`. Stepping to 0
/// returns `d` exactly.
pub fn euler_step(x: &[f64], denoised: &[f64], sigma_from: f64, sigma_to: f64) -> Result<Vec<f64>> {
    if !(sigma_from > sigma_to && sigma_to >= 0.0) || !sigma_from.is_finite() {
        return Err(Error::ScheduleOrder { from: sigma_from, to: sigma_to });
    }
    if x.len() != denoised.len() {
        return Err(Error::ShapeMismatch { expected: x.len(), got: denoised.len() });
    }
    if sigma_to == 0.0 {
        return Ok(denoised.to_vec());
    }
    let ratio = (sigma_to - sigma_from) / sigma_from;
    Ok(x.iter().zip(denoised).map(|(xi, di)| xi + ratio * (xi - di)).collect())
}

/// The Euler step down from sigma = infinity, `sigma_1 * n + D_inf(n)`,
/// where `n` is the unit-Gaussian factor of the initial noise. No quantity
/// involving the infinite sigma is ever formed.
pub fn ztsnr_first_step(
    noise: &[f64],
    sigma_1: f64,
    precond: &Preconditioner,
    net: &dyn RawNetwork,
    sigma_cond: f64,
    cond: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let d = precond.denoise_infinite(net, noise, sigma_cond, cond)?;
    Ok(combine_first_step(noise, sigma_1, &d))
}

fn combine_first_step(noise: &[f64], sigma_1: f64, denoised: &[f64]) -> Vec<f64> {
    noise.iter().zip(denoised).map(|(n, d)| sigma_1 * n + d).collect()
}

struct Guided<'a> {
    precond: &'a Preconditioner,
    net: &'a dyn RawNetwork,
    scale: f64,
    cond: Option<&'a [f64]>,
    uncond: Option<&'a [f64]>,
}

impl<'a> Guided<'a> {
    fn new(
        config: &SamplerConfig,
        precond: &'a Preconditioner,
        net: &'a dyn RawNetwork,
        conditioning: Conditioning<'a>,
    ) -> Result<Self> {
        if config.cfg_scale > 1.0 && (conditioning.cond.is_none() || conditioning.uncond.is_none()) {
            return Err(Error::param("guidance needs both a condition and an unconditional vector"));
        }
        Ok(Self {
            precond,
            net,
            scale: config.cfg_scale,
            cond: conditioning.cond,
            uncond: conditioning.uncond,
        })
    }

    fn blend(&self, eval: impl Fn(Option<&[f64]>) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
        let conditional = eval(self.cond)?;
        if self.scale == 1.0 {
            return Ok(conditional);
        }
        let unconditional = eval(self.uncond)?;
        Ok(unconditional
            .iter()
            .zip(&conditional)
            .map(|(u, c)| u + self.scale * (c - u))
            .collect())
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.blend(|c| self.precond.denoise(self.net, x, sigma, c))
    }

    fn denoise_infinite(&self, noise: &[f64], sigma_cond: f64) -> Result<Vec<f64>> {
        self.blend(|c| self.precond.denoise_infinite(self.net, noise, sigma_cond, c))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn euler_from(
    guided: &Guided<'_>,
    sigmas: &[f64],
    start: usize,
    mut x: Vec<f64>,
    mut trace: Option<&mut Vec<TraceStep>>,
) -> Result<Vec<f64>> {
    for i in start..sigmas.len() - 1 {
        let d = guided.denoise(&x, sigmas[i])?;
        x = euler_step(&x, &d, sigmas[i], sigmas[i + 1])?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceStep { step: i, sigma: sigmas[i], denoised: d });
        }
    }
    Ok(x)
}

fn run_from_noise(
    config: &SamplerConfig,
    guided: &Guided<'_>,
    rng: &mut ChaCha8Rng,
    dim: usize,
    mut trace: Option<&mut Vec<TraceStep>>,
) -> Result<Vec<f64>> {
    let sigmas = config.sigmas.sigmas();
    let noise = gaussian(rng, dim);
    if config.ztsnr_first_step {
        let d = guided.denoise_infinite(&noise, config.sigmas.terminal_clamp())?;
        let x = combine_first_step(&noise, sigmas[1], &d);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceStep { step: 0, sigma: sigmas[0], denoised: d });
        }
        euler_from(guided, &sigmas, 1, x, trace)
    } else {
        let x = noise.iter().map(|n| sigmas[0] * n).collect();
        euler_from(guided, &sigmas, 0, x, trace)
    }
}

/// Draws one sample of dimension `dim` from pure noise.
pub fn sample(
    config: &SamplerConfig,
    precond: &Preconditioner,
    net: &dyn RawNetwork,
    dim: usize,
    conditioning: Conditioning<'_>,
) -> Result<Vec<f64>> {
    let guided = Guided::new(config, precond, net, conditioning)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run_from_noise(config, &guided, &mut rng, dim, None)
}

/// Like [`sample`], also returning the denoised estimate at every step.
pub fn sample_with_trace(
    config: &SamplerConfig,
    precond: &Preconditioner,
    net: &dyn RawNetwork,
    dim: usize,
    conditioning: Conditioning<'_>,
) -> Result<(Vec<f64>, Vec<TraceStep>)> {
    let guided = Guided::new(config, precond, net, conditioning)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    let x = run_from_noise(config, &guided, &mut rng, dim, Some(&mut trace))?;
    Ok((x, trace))
}

/// `count` samples drawn sequentially from one seeded generator.
pub fn sample_batch(
    config: &SamplerConfig,
    precond: &Preconditioner,
    net: &dyn RawNetwork,
    dim: usize,
    count: usize,
    conditioning: Conditioning<'_>,
) -> Result<Vec<Vec<f64>>> {
    let guided = Guided::new(config, precond, net, conditioning)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..count)
        .map(|_| run_from_noise(config, &guided, &mut rng, dim, None))
        .collect()
}

/// img2img entry: noises `x_init` to `sigmas[start_index]` and Euler-steps
/// from there. The analytic infinite-noise step is never used here.
pub fn sample_from(
    config: &SamplerConfig,
    precond: &Preconditioner,
    net: &dyn RawNetwork,
    x_init: &[f64],
    start_index: usize,
    conditioning: Conditioning<'_>,
) -> Result<Vec<f64>> {
    let sigmas = config.sigmas.sigmas();
    if start_index + 1 >= sigmas.len() {
        return Err(Error::param(format!(
            "start_index {start_index} leaves no step in a schedule of {} sigmas",
            sigmas.len()
        )));
    }
    let guided = Guided::new(config, precond, net, conditioning)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = gaussian(&mut rng, x_init.len());
    let start_sigma = sigmas[start_index];
    let x = x_init.iter().zip(&noise).map(|(a, n)| a + start_sigma * n).collect();
    euler_from(&guided, &sigmas, start_index, x, None)
}
