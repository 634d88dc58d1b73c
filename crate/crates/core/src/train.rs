//! v-prediction training of the toy denoiser with MinSNR and tag-based
//! loss weighting.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bucketing::ManifestEntry;
use crate::error::{Error, Result};
use crate::network::{ToyNetwork, DEFAULT_HIDDEN};
use crate::precond::Preconditioner;
use crate::schedule::{alpha_bar_to_sigma, snr_from_alpha_bar, NoiseSchedule, DEFAULT_TERMINAL_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MinSnrVariant {
    /// `min(snr, gamma) / (snr + 1)`; zero weight at SNR = 0.
    Standard,
    /// `(min(snr, gamma) + 1) / (snr + 1)`; weight 1 at SNR = 0.
    #[default]
    ZtsnrSafe,
}

impl FromStr for MinSnrVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "ztsnr_safe" | "ztsnr-safe" => Ok(Self::ZtsnrSafe),
            other => Err(Error::param(format!("unknown MinSNR variant {other:?}"))),
        }
    }
}

/// MinSNR loss weight for a v-prediction objective.
pub fn minsnr_weight(snr: f64, gamma: f64, variant: MinSnrVariant) -> f64 {
    let clipped = snr.min(gamma);
    match variant {
        MinSnrVariant::Standard => clipped / (snr + 1.0),
        MinSnrVariant::ZtsnrSafe => (clipped + 1.0) / (snr + 1.0),
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Per-sample loss weights from tag frequencies within each tag class.
///
/// A tag's weight is `clamp((median_freq_of_class / freq)^alpha, low, high)`;
/// a sample's weight is the mean of its tags' weights, or 1 without tags.
pub fn tag_loss_weights(
    manifest: &[ManifestEntry],
    alpha: f64,
    clamp: (f64, f64),
) -> Result<BTreeMap<String, f64>> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (low, high) = clamp;
    if !(low > 0.0 && low <= 1.0 && high >= 1.0) {
        return Err(Error::param(format!("need 0 < low <= 1 <= high, got ({low}, {high})")));
    }

    let mut freq: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for entry in manifest {
        for (class, tags) in &entry.tags {
            let mut seen: Vec<&str> = tags.iter().map(String::as_str).collect();
            seen.sort_unstable();
            seen.dedup();
            for tag in seen {
                *freq.entry((class.as_str(), tag)).or_default() += 1;
            }
        }
    }
    let mut per_class: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (&(class, _), &n) in &freq {
        per_class.entry(class).or_default().push(n as f64);
    }
    let medians: BTreeMap<&str, f64> = per_class
        .into_iter()
        .map(|(class, mut counts)| {
            counts.sort_by(f64::total_cmp);
            (class, median(&counts))
        })
        .collect();
    let tag_weight: HashMap<(&str, &str), f64> = freq
        .iter()
        .map(|(&(class, tag), &n)| {
            let w = (medians[class] / n as f64).powf(alpha).clamp(low, high);
            ((class, tag), w)
        })
        .collect();

    Ok(manifest
        .iter()
        .map(|entry| {
            let weights: Vec<f64> = entry
                .tags
                .iter()
                .flat_map(|(class, tags)| tags.iter().map(move |t| (class.as_str(), t.as_str())))
                .map(|key| tag_weight[&key])
                .collect();
            let w = if weights.is_empty() {
                1.0
            } else {
                weights.iter().sum::<f64>() / weights.len() as f64
            };
            (entry.id.clone(), w)
        })
        .collect())
}

/// Training points with ids, plus optional per-sample condition vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub ids: Vec<String>,
    pub points: Vec<Vec<f64>>,
    pub conds: Option<Vec<Vec<f64>>>,
}

impl SampleSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let ids = (0..points.len()).map(|i| i.to_string()).collect();
        let set = Self { ids, points, conds: None };
        set.validate()?;
        Ok(set)
    }

    /// `count` points from an isotropic Gaussian around `mean`; `std = 0`
    /// gives a point mass.
    pub fn gaussian_cluster(mean: &[f64], std: f64, count: usize, seed: u64) -> Result<Self> {
        if std.is_nan() || std < 0.0 {
            return Err(Error::param("cluster std must be >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..count)
            .map(|_| {
                mean.iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + std * z
                    })
                    .collect()
            })
            .collect();
        Self::new(points)
    }

    pub fn with_conds(mut self, conds: Vec<Vec<f64>>) -> Result<Self> {
        self.conds = Some(conds);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn cond_dim(&self) -> usize {
        self.conds.as_ref().and_then(|c| c.first()).map_or(0, Vec::len)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for p in &self.points {
            for (a, v) in m.iter_mut().zip(p) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.len() as f64);
        m
    }

    fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::param("sample set is empty"));
        }
        let dim = self.dim();
        if dim == 0 || self.points.iter().any(|p| p.len() != dim) {
            return Err(Error::param("all points need the same non-zero dimension"));
        }
        if self.ids.len() != self.points.len() {
            return Err(Error::param("ids and points differ in length"));
        }
        if let Some(conds) = &self.conds {
            let cd = self.cond_dim();
            if conds.len() != self.points.len() || conds.iter().any(|c| c.len() != cd) {
                return Err(Error::param("conditions must match points one-to-one with equal length"));
            }
        }
        Ok(())
    }
}

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Optimizer {
    /// `p -= lr * g`.
    #[default]
    Sgd,
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::adam()),
            other => Err(Error::param(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Learning-rate schedule over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to 0 at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let progress = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::param(format!("unknown learning-rate schedule {other:?}"))),
        }
    }
}

struct OptimizerState {
    kind: Optimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        let moments = if matches!(kind, Optimizer::Adam { .. }) { n } else { 0 };
        Self { kind, first: vec![0.0; moments], second: vec![0.0; moments], t: 0 }
    }

    fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g),
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    *p -= lr * (self.first[i] / c1) / ((self.second[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub schedule: NoiseSchedule,
    /// Conditioning sigma handed to the network for the zero-SNR step.
    pub terminal_clamp: f64,
    pub minsnr_gamma: f64,
    pub minsnr_variant: MinSnrVariant,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub lr_schedule: LrSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Probability of replacing a sample's condition by zeros.
    pub cond_dropout: f64,
    pub tag_weights: Option<BTreeMap<String, f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::sdxl(),
            terminal_clamp: DEFAULT_TERMINAL_CLAMP,
            minsnr_gamma: 5.0,
            minsnr_variant: MinSnrVariant::default(),
            learning_rate: 0.01,
            optimizer: Optimizer::Sgd,
            lr_schedule: LrSchedule::Constant,
            steps: 2000,
            batch_size: 64,
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            cond_dropout: 0.0,
            tag_weights: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.minsnr_gamma.is_nan() || self.minsnr_gamma <= 0.0 {
            return Err(Error::param("minsnr_gamma must be > 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::param("cond_dropout must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One noised training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sample: usize,
    pub timestep: usize,
    pub input: Vec<f64>,
    pub sigma_cond: f64,
    pub cond: Option<Vec<f64>>,
    pub target: Vec<f64>,
    pub snr: f64,
}

/// Noises `x0` at `timestep`. Finite-SNR steps are noised in VP space and
/// rescaled to the VE convention; the zero-SNR step feeds unit-variance
/// noise straight to the network with the infinite-noise target.
pub fn make_example(
    precond: &Preconditioner,
    schedule: &NoiseSchedule,
    terminal_clamp: f64,
    x0: &[f64],
    timestep: usize,
    noise: &[f64],
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let alpha_bar = schedule.alpha_bars()[timestep];
    if alpha_bar == 0.0 {
        return Ok((noise.to_vec(), terminal_clamp, precond.training_target_infinite(x0)));
    }
    let sigma = alpha_bar_to_sigma(alpha_bar);
    let (signal, spread) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let x_ve: Vec<f64> = x0
        .iter()
        .zip(noise)
        .map(|(a, e)| (signal * a + spread * e) / signal)
        .collect();
    let c_in = precond.scalings(sigma)?.c_in;
    let input = x_ve.iter().map(|v| c_in * v).collect();
    let target = precond.training_target(x0, &x_ve, sigma)?;
    Ok((input, sigma, target))
}

/// Mean of `weight_i * |F(input_i) - target_i|^2` and its gradient.
pub fn weighted_loss(net: &ToyNetwork, examples: &[Example], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    assert_eq!(examples.len(), weights.len(), "one weight per example");
    let mut grads = vec![0.0; net.num_params()];
    let mut total = 0.0;
    for (ex, &w) in examples.iter().zip(weights) {
        total += net.accumulate_loss(&ex.input, ex.sigma_cond, ex.cond.as_deref(), &ex.target, w, &mut grads)?;
    }
    let n = examples.len() as f64;
    grads.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grads))
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub network: ToyNetwork,
    /// Batch loss after each step.
    pub losses: Vec<f64>,
}

/// Initializes a network from `config.seed` and trains it.
pub fn train_toy(config: &TrainConfig, data: &SampleSet, precond: &Preconditioner) -> Result<Trained> {
    let mut network = ToyNetwork::new(data.dim(), data.cond_dim(), &config.hidden, config.seed);
    let losses = train_network(&mut network, config, data, precond)?;
    Ok(Trained { network, losses })
}

/// Trains an existing network in place; returns the per-step loss log.
pub fn train_network(
    network: &mut ToyNetwork,
    config: &TrainConfig,
    data: &SampleSet,
    precond: &Preconditioner,
) -> Result<Vec<f64>> {
    config.validate()?;
    data.validate()?;
    if network.input_dim() != data.dim() || network.cond_dim() != data.cond_dim() {
        return Err(Error::param("network dimensions do not match the sample set"));
    }
    let sample_weights: Vec<f64> = match &config.tag_weights {
        Some(map) => data.ids.iter().map(|id| map.get(id).copied().unwrap_or(1.0)).collect(),
        None => vec![1.0; data.len()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let num_steps = config.schedule.num_steps();
    let dim = data.dim();
    let mut optimizer = OptimizerState::new(config.optimizer, network.num_params());
    let mut losses = Vec::with_capacity(config.steps);
    let mut examples = Vec::with_capacity(config.batch_size);
    let mut weights = Vec::with_capacity(config.batch_size);

    for step in 0..config.steps {
        examples.clear();
        weights.clear();
        for _ in 0..config.batch_size {
            let sample = rng.random_range(0..data.len());
            let timestep = rng.random_range(0..num_steps);
            let noise: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let cond = data.conds.as_ref().map(|c| {
                if config.cond_dropout > 0.0 && rng.random::<f64>() < config.cond_dropout {
                    vec![0.0; data.cond_dim()]
                } else {
                    c[sample].clone()
                }
            });
            let (input, sigma_cond, target) = make_example(
                precond,
                &config.schedule,
                config.terminal_clamp,
                &data.points[sample],
                timestep,
                &noise,
            )?;
            let snr = snr_from_alpha_bar(config.schedule.alpha_bars()[timestep]);
            weights.push(sample_weights[sample] * minsnr_weight(snr, config.minsnr_gamma, config.minsnr_variant));
            examples.push(Example { sample, timestep, input, sigma_cond, cond, target, snr });
        }
        let (loss, grads) = weighted_loss(network, &examples, &weights)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        let lr = config.lr_schedule.rate(config.learning_rate, step, config.steps);
        optimizer.apply(network.params_mut(), &grads, lr);
        losses.push(loss);
    }
    Ok(losses)
}
