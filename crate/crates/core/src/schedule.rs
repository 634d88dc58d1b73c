//! Discrete VP noise schedules, zero-terminal-SNR rescaling and the VE sigma view.
//!
//! Timesteps are 0-based: index `0` is the least noisy training step and
//! index `num_steps - 1` the most noisy one. Sigma schedules are stored in
//! sampling order, i.e. descending sigma.

use std::io::Write;

use crate::error::{Error, Result};
use crate::fmt::sig9;

pub const DEFAULT_NUM_STEPS: usize = 1000;
pub const SDXL_BETA_START: f64 = 0.00085;
pub const SDXL_BETA_END: f64 = 0.012;
/// Finite stand-in for sigma = infinity.
pub const DEFAULT_TERMINAL_CLAMP: f64 = 20000.0;
pub const MIN_TERMINAL_CLAMP: f64 = 100.0;

/// A discrete variance-preserving schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    ztsnr: bool,
}

impl NoiseSchedule {
    /// "Scaled linear" betas: `sqrt(beta)` is linear between the endpoints.
    pub fn build_vp(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::param(format!("num_steps must be >= 2, got {num_steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
        let last = (num_steps - 1) as f64;
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| {
                let frac = i as f64 / last;
                let root = lo + (hi - lo) * frac;
                root * root
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars, ztsnr: false })
    }

    /// The SD/SDXL training schedule: 1000 steps, beta 0.00085 to 0.012.
    pub fn sdxl() -> Self {
        Self::build_vp(DEFAULT_NUM_STEPS, SDXL_BETA_START, SDXL_BETA_END)
            .expect("default schedule parameters are valid")
    }

    /// Builds a schedule directly from cumulative alpha products.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.len() < 2 {
            return Err(Error::param("schedule needs at least 2 steps"));
        }
        if !(alpha_bars[0] > 0.0 && alpha_bars[0] < 1.0) {
            return Err(Error::param(format!("first alpha_bar must lie in (0, 1), got {}", alpha_bars[0])));
        }
        for w in alpha_bars.windows(2) {
            if !(w[1] < w[0] && w[1] >= 0.0) {
                return Err(Error::param(format!(
                    "alpha_bars must be strictly decreasing and non-negative ({} -> {})",
                    w[0], w[1]
                )));
            }
        }
        let ztsnr = *alpha_bars.last().unwrap() == 0.0;
        let betas = betas_from_alpha_bars(&alpha_bars);
        Ok(Self { betas, alpha_bars, ztsnr })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn is_ztsnr(&self) -> bool {
        self.ztsnr
    }

    /// VE sigma of timestep `t`; infinite when `alpha_bar == 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        alpha_bar_to_sigma(self.alpha_bars[t])
    }

    pub fn snr(&self, t: usize) -> f64 {
        snr_from_alpha_bar(self.alpha_bars[t])
    }

    /// Rescales so `sqrt(alpha_bar)` is shifted and stretched to end at
    /// exactly zero while the first step is left untouched.
    pub fn rescale_to_ztsnr(&self) -> Result<Self> {
        if self.ztsnr {
            return Err(Error::AlreadyZtsnr);
        }
        let roots: Vec<f64> = self.alpha_bars.iter().map(|a| a.sqrt()).collect();
        let first = roots[0];
        let last = *roots.last().unwrap();
        if !(first > last && last > 0.0) {
            return Err(Error::param("rescale needs alpha_bar_1 > alpha_bar_T > 0"));
        }
        let scale = first / (first - last);
        let mut alpha_bars: Vec<f64> = roots
            .iter()
            .map(|&r| {
                let shifted = (r - last) * scale;
                shifted * shifted
            })
            .collect();
        alpha_bars[0] = self.alpha_bars[0];
        *alpha_bars.last_mut().unwrap() = 0.0;
        let betas = betas_from_alpha_bars(&alpha_bars);
        Ok(Self { betas, alpha_bars, ztsnr: true })
    }

    /// VE view of the training steps, in sampling order. The terminal step's
    /// sigma is capped at `terminal_clamp` (an infinite sigma becomes exactly
    /// the clamp); earlier steps at or above the clamp are dropped so the
    /// sequence stays strictly decreasing.
    pub fn sigma_view(&self, terminal_clamp: f64) -> Result<SigmaSchedule> {
        if !terminal_clamp.is_finite() || terminal_clamp < MIN_TERMINAL_CLAMP {
            return Err(Error::param(format!(
                "terminal_clamp must be finite and >= {MIN_TERMINAL_CLAMP}, got {terminal_clamp}"
            )));
        }
        let top = self.num_steps() - 1;
        let mut entries = vec![SigmaEntry {
            timestep: top,
            alpha_bar: self.alpha_bars[top],
            sigma: alpha_bar_to_sigma(self.alpha_bars[top]).min(terminal_clamp),
        }];
        // Steps whose sigma reaches the clamp collapse onto the terminal entry.
        entries.extend(
            (0..top)
                .rev()
                .map(|t| SigmaEntry {
                    timestep: t,
                    alpha_bar: self.alpha_bars[t],
                    sigma: alpha_bar_to_sigma(self.alpha_bars[t]),
                })
                .filter(|e| e.sigma < terminal_clamp),
        );
        Ok(SigmaSchedule {
            entries,
            terminal_clamp,
            ztsnr: self.ztsnr,
            final_zero: false,
        })
    }
}

fn betas_from_alpha_bars(alpha_bars: &[f64]) -> Vec<f64> {
    let mut prev = 1.0;
    alpha_bars
        .iter()
        .map(|&a| {
            let beta = 1.0 - a / prev;
            prev = a;
            beta
        })
        .collect()
}

/// `sigma = sqrt((1 - alpha_bar) / alpha_bar)`.
pub fn alpha_bar_to_sigma(alpha_bar: f64) -> f64 {
    if alpha_bar == 0.0 {
        f64::INFINITY
    } else {
        ((1.0 - alpha_bar) / alpha_bar).sqrt()
    }
}

pub fn sigma_to_alpha_bar(sigma: f64) -> f64 {
    if sigma.is_infinite() {
        0.0
    } else {
        1.0 / (1.0 + sigma * sigma)
    }
}

/// `alpha_bar / (1 - alpha_bar)`, exactly 0 at zero terminal SNR.
pub fn snr_from_alpha_bar(alpha_bar: f64) -> f64 {
    if alpha_bar == 0.0 {
        0.0
    } else {
        alpha_bar / (1.0 - alpha_bar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaEntry {
    pub timestep: usize,
    pub alpha_bar: f64,
    pub sigma: f64,
}

/// Descending VE sigmas for sampling, optionally terminated by a `0` marker
/// meaning "step onto the denoised estimate".
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    entries: Vec<SigmaEntry>,
    terminal_clamp: f64,
    ztsnr: bool,
    final_zero: bool,
}

impl SigmaSchedule {
    /// An explicit schedule, used for img2img-style or hand-built runs.
    /// `sigmas` must be strictly decreasing and positive; a trailing zero
    /// marker is appended.
    pub fn from_sigmas(sigmas: &[f64], ztsnr: bool, terminal_clamp: f64) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::param("empty sigma schedule"));
        }
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::param("sigmas must be finite and positive"));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::param("sigmas must be strictly decreasing"));
        }
        if ztsnr && sigmas[0] != terminal_clamp {
            return Err(Error::param("a zero-terminal-SNR schedule must start at the terminal clamp"));
        }
        let entries = sigmas
            .iter()
            .enumerate()
            .map(|(i, &sigma)| SigmaEntry {
                timestep: sigmas.len() - 1 - i,
                alpha_bar: if ztsnr && i == 0 { 0.0 } else { sigma_to_alpha_bar(sigma) },
                sigma,
            })
            .collect();
        Ok(Self { entries, terminal_clamp, ztsnr, final_zero: true })
    }

    /// Sigmas in sampling order, including the trailing `0` marker if present.
    pub fn sigmas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.entries.iter().map(|e| e.sigma).collect();
        if self.final_zero {
            out.push(0.0);
        }
        out
    }

    pub fn entries(&self) -> &[SigmaEntry] {
        &self.entries
    }

    pub fn terminal_clamp(&self) -> f64 {
        self.terminal_clamp
    }

    /// True when the first entry stands in for sigma = infinity.
    pub fn is_ztsnr(&self) -> bool {
        self.ztsnr
    }

    pub fn ends_at_zero(&self) -> bool {
        self.final_zero
    }

    pub fn max_sigma(&self) -> f64 {
        self.entries[0].sigma
    }

    /// Picks `n_steps` timesteps with uniform linear spacing from the
    /// highest to the lowest index (both included, rounded half up) and
    /// appends the `0` marker.
    pub fn inference_sigmas(&self, n_steps: usize) -> Result<SigmaSchedule> {
        if self.final_zero {
            return Err(Error::param("schedule is already an inference schedule"));
        }
        let len = self.entries.len();
        if n_steps < 2 || n_steps > len {
            return Err(Error::param(format!("n_steps must lie in [2, {len}], got {n_steps}")));
        }
        let top = (len - 1) as u64;
        let gaps = (n_steps - 1) as u64;
        let entries = (0..n_steps as u64)
            .map(|i| {
                // timestep = floor(top * (gaps - i) / gaps + 1/2), in integers
                let timestep = (2 * top * (gaps - i) + gaps) / (2 * gaps);
                self.entries[len - 1 - timestep as usize]
            })
            .collect();
        Ok(SigmaSchedule {
            entries,
            terminal_clamp: self.terminal_clamp,
            ztsnr: self.ztsnr,
            final_zero: true,
        })
    }

    /// Writes `index,timestep,alpha_bar,sigma,snr`. The trailing zero marker
    /// has an empty timestep and infinite SNR.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,timestep,alpha_bar,sigma,snr")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                i,
                e.timestep,
                sig9(e.alpha_bar),
                sig9(e.sigma),
                sig9(snr_from_alpha_bar(e.alpha_bar))
            )?;
        }
        if self.final_zero {
            writeln!(out, "{},,1,0,inf", self.entries.len())?;
        }
        Ok(())
    }
}

/// Keeps SNR comparable when the canvas area changes:
/// `sigma_max * sqrt(new_area / ref_area)`.
pub fn scale_sigma_max_for_resolution(sigma_max: f64, ref_area: f64, new_area: f64) -> Result<f64> {
    if !(ref_area > 0.0 && new_area > 0.0) {
        return Err(Error::param("areas must be positive"));
    }
    Ok(sigma_max * (new_area / ref_area).sqrt())
}

/// 2x2 average pooling of a row-major `width x height` field (odd trailing
/// rows/columns are dropped).
pub fn mean_pool_2x2(field: &[f64], width: usize, height: usize) -> Vec<f64> {
    assert_eq!(field.len(), width * height, "field size");
    let (pw, ph) = (width / 2, height / 2);
    let mut out = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        for x in 0..pw {
            let i = 2 * y * width + 2 * x;
            out.push(0.25 * (field[i] + field[i + 1] + field[i + width] + field[i + width + 1]));
        }
    }
    out
}
