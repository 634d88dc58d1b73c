//! The `noisekit` command line.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, out-of-range
//! parameters), 2 on data errors (unreadable or malformed inputs, I/O).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bucketing::{
    assign_bucket, generate_buckets, plan_epoch, read_manifest, BucketLayout, BucketedDataset,
    ManifestEntry, DEFAULT_MAX_AREA, DEFAULT_MAX_DIM, DEFAULT_PRUNE_THRESHOLD, DEFAULT_STEP,
};
use crate::error::{Error, Result};
use crate::experiment::{run_leakage_experiment, LeakageConfig};
use crate::fmt::sig9;
use crate::network::ToyNetwork;
use crate::plot::plot_from_csv;
use crate::precond::Preconditioner;
use crate::sampler::{sample_batch, sample_with_trace, Conditioning, SamplerConfig};
use crate::schedule::{NoiseSchedule, DEFAULT_NUM_STEPS, DEFAULT_TERMINAL_CLAMP, SDXL_BETA_END, SDXL_BETA_START};
use crate::stats::{default_channel_axis, ChannelStats, LatentScaling};
use crate::tensor::{DType, Tensor};
use crate::train::{train_toy, SampleSet, TrainConfig};

/// Written into every model manifest; checked on load.
pub const MODEL_FORMAT: &str = "noisekit-toy-v1";

#[derive(Debug, Parser)]
#[command(name = "noisekit", version, about = "Zero-terminal-SNR diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Emit a sigma schedule as CSV.
    Schedule(ScheduleArgs),
    /// Aspect-ratio bucket layout, assignment and epoch plans.
    #[command(subcommand)]
    Buckets(BucketsCommand),
    /// Per-channel latent statistics.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Train the toy denoiser from a key = value config file.
    TrainToy(TrainToyArgs),
    /// Sample from a trained toy denoiser.
    SampleToy(SampleToyArgs),
    /// Paired mean-leakage experiment with and without ZTSNR.
    DemoZtsnr(DemoArgs),
    /// Render CSV output as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = DEFAULT_NUM_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = SDXL_BETA_START)]
    beta_start: f64,
    #[arg(long, default_value_t = SDXL_BETA_END)]
    beta_end: f64,
    /// Rescale to zero terminal SNR.
    #[arg(long)]
    ztsnr: bool,
    /// Largest sigma kept; the infinite terminal sigma is replaced by it.
    #[arg(long, default_value_t = DEFAULT_TERMINAL_CLAMP)]
    clamp: f64,
    /// Subsample to this many sampling steps (plus the final zero).
    #[arg(long)]
    inference_steps: Option<usize>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LayoutArgs {
    #[arg(long, default_value_t = DEFAULT_MAX_AREA)]
    max_area: u32,
    #[arg(long, default_value_t = DEFAULT_MAX_DIM)]
    max_dim: u32,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: u32,
}

impl LayoutArgs {
    fn layout(&self) -> Result<BucketLayout> {
        generate_buckets(self.max_area, self.max_dim, self.step)
    }
}

#[derive(Debug, Subcommand)]
enum BucketsCommand {
    /// Print the bucket layout as `width,height,aspect`.
    Generate {
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Annotate a JSONL manifest with bucket indices.
    Assign {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PRUNE_THRESHOLD)]
        prune_threshold: f64,
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Emit one epoch's batch plan as JSONL.
    Plan {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[arg(long, default_value_t = 1)]
        world_size: usize,
        #[arg(long)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_PRUNE_THRESHOLD)]
        prune_threshold: f64,
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum StatsCommand {
    /// Stream tensor files into `channel,mean,std,count`.
    Welford {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Defaults to 1 for rank-4 tensors, else 0.
        #[arg(long)]
        channel_axis: Option<usize>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Normalize a tensor file with a stats CSV or a single legacy scale.
    #[command(group(ArgGroup::new("scaling").required(true).args(["stats", "legacy_scale"])))]
    Normalize {
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        legacy_scale: Option<f64>,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to overwriting the input.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        channel_axis: Option<usize>,
        /// Map back from model space to latent space.
        #[arg(long)]
        inverse: bool,
    },
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving `<name>.nvt`, `<name>.json` and `<name>_loss.csv`.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value = "model")]
    name: String,
}

#[derive(Debug, Args)]
struct SampleToyArgs {
    /// Model tensor; its manifest is the same path with a `.json` extension.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 28)]
    steps: usize,
    /// Sample on the ZTSNR schedule with the analytic first step.
    #[arg(long, overrides_with = "no_ztsnr")]
    ztsnr: bool,
    /// Sample on the unrescaled schedule from `sigma_max * noise`.
    #[arg(long, overrides_with = "ztsnr")]
    no_ztsnr: bool,
    #[arg(long, default_value_t = 1.0)]
    cfg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Comma-separated condition vector.
    #[arg(long)]
    cond: Option<String>,
    /// Per-step denoised estimates of the first sample.
    #[arg(long)]
    intermediates: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Consecutive seeds to run, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    runs: u64,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long = "input", short, required = true)]
    inputs: Vec<PathBuf>,
    /// One label per input; defaults to the file stems.
    #[arg(long = "label")]
    labels: Vec<String>,
    #[arg(long, short)]
    output: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_) | Error::AlreadyZtsnr => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Runs the CLI on `argv` (program name first) against the process streams.
pub fn run(argv: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the CLI writing to the given streams instead of stdout and stderr.
pub fn run_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Schedule(a) => schedule(a, out),
        Command::Buckets(c) => buckets(c, out),
        Command::Stats(c) => stats(c, out),
        Command::TrainToy(a) => train(a, out),
        Command::SampleToy(a) => sample_toy(a, out),
        Command::DemoZtsnr(a) => demo(a, out),
        Command::Plot(a) => plot(a, out),
    };
    let flushed = out.flush();
    match (result, flushed) {
        (Ok(()), Ok(())) => 0,
        (Ok(()), Err(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
        (Err(Failure::Usage(msg)), _) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        (Err(Failure::Data(msg)), _) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

/// Sends `body` to `path` when given, else to `out`.
fn emit(path: Option<&Path>, out: &mut dyn Write, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> CliResult {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            body(&mut w)?;
            w.flush()?;
        }
        None => body(out)?,
    }
    Ok(())
}

fn open(path: &Path) -> std::result::Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_manifest(path: &Path) -> std::result::Result<Vec<ManifestEntry>, Failure> {
    let manifest = read_manifest(open(path)?)?;
    if manifest.is_empty() {
        return Err(Error::EmptyManifest.into());
    }
    Ok(manifest)
}

fn schedule(a: ScheduleArgs, out: &mut dyn Write) -> CliResult {
    let mut base = NoiseSchedule::build_vp(a.steps, a.beta_start, a.beta_end)?;
    if a.ztsnr {
        base = base.rescale_to_ztsnr()?;
    }
    let mut view = base.sigma_view(a.clamp)?;
    if let Some(n) = a.inference_steps {
        view = view.inference_sigmas(n)?;
    }
    emit(a.output.as_deref(), out, |w| Ok(view.write_csv(w)?))
}

#[derive(Serialize)]
struct AssignedLine<'a> {
    #[serde(flatten)]
    entry: &'a ManifestEntry,
    bucket: Option<usize>,
    bucket_width: Option<u32>,
    bucket_height: Option<u32>,
    distance: f64,
}

fn buckets(c: BucketsCommand, out: &mut dyn Write) -> CliResult {
    match c {
        BucketsCommand::Generate { layout, output } => {
            let layout = layout.layout()?;
            emit(output.as_deref(), out, |w| Ok(layout.write_csv(w)?))
        }
        BucketsCommand::Assign { manifest, prune_threshold, layout, output } => {
            let layout = layout.layout()?;
            let manifest = load_manifest(&manifest)?;
            emit(output.as_deref(), out, |w| {
                for entry in &manifest {
                    let a = assign_bucket(&layout, (entry.width, entry.height), prune_threshold)?;
                    let res = a.bucket().map(|i| layout.buckets()[i]);
                    let line = AssignedLine {
                        entry,
                        bucket: a.bucket(),
                        bucket_width: res.map(|r| r.0),
                        bucket_height: res.map(|r| r.1),
                        distance: a.distance(),
                    };
                    serde_json::to_writer(&mut *w, &line)?;
                    w.write_all(b"\n")?;
                }
                Ok(())
            })
        }
        BucketsCommand::Plan { manifest, epoch, world_size, batch_size, seed, prune_threshold, layout, output } => {
            let layout = layout.layout()?;
            let manifest = load_manifest(&manifest)?;
            let dataset = BucketedDataset::new(&manifest, layout, prune_threshold)?;
            let plan = plan_epoch(&dataset, epoch, world_size, batch_size, seed)?;
            emit(output.as_deref(), out, |w| plan.write_jsonl(&dataset.layout, w))
        }
    }
}

fn stats(c: StatsCommand, out: &mut dyn Write) -> CliResult {
    match c {
        StatsCommand::Welford { inputs, channel_axis, output } => {
            let mut total: Option<ChannelStats> = None;
            for path in &inputs {
                let (tensor, _) = Tensor::read_from(open(path)?)?;
                let axis = channel_axis.unwrap_or_else(|| default_channel_axis(tensor.dims().len()));
                let channels = *tensor
                    .dims()
                    .get(axis)
                    .ok_or_else(|| Failure::Usage(format!("channel axis {axis} out of range for {}", path.display())))?;
                let mut part = ChannelStats::new(channels);
                part.welford_update(&tensor, axis)?;
                match total.as_mut() {
                    None => total = Some(part),
                    Some(t) => t.merge(&part)?,
                }
            }
            let total = total.expect("clap requires at least one input");
            emit(output.as_deref(), out, |w| Ok(total.write_csv(w)?))
        }
        StatsCommand::Normalize { stats, legacy_scale, input, output, channel_axis, inverse } => {
            let scaling = match (stats, legacy_scale) {
                (Some(path), _) => LatentScaling::read_csv(open(&path)?)?,
                (None, Some(s)) if s > 0.0 && s.is_finite() => LatentScaling::Legacy(s),
                (None, Some(s)) => return Err(Failure::Usage(format!("legacy scale must be > 0, got {s}"))),
                (None, None) => unreachable!("clap requires one scaling source"),
            };
            let (tensor, dtype) = Tensor::read_from(open(&input)?)?;
            let axis = channel_axis.unwrap_or_else(|| default_channel_axis(tensor.dims().len()));
            let result = if inverse { scaling.denormalize(&tensor, axis)? } else { scaling.normalize(&tensor, axis)? };
            result.save(output.as_deref().unwrap_or(&input), dtype)?;
            Ok(())
        }
    }
}

/// Everything a `train-toy` config file can set.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub train: TrainConfig,
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ztsnr: bool,
    pub sigma_data: f64,
    pub data: ToyData,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyData {
    Cluster { mean: Vec<f64>, std: f64, size: usize },
    /// CSV of points, one numeric column per dimension.
    File(PathBuf),
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            num_steps: DEFAULT_NUM_STEPS,
            beta_start: SDXL_BETA_START,
            beta_end: SDXL_BETA_END,
            ztsnr: true,
            sigma_data: 1.0,
            data: ToyData::Cluster { mean: vec![3.0, -2.0], std: 0.0, size: 1024 },
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Format(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

impl ToyConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative data paths
    /// resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected key = value", lineno + 1)))?;
            if pairs.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Format(format!("config line {}: duplicate key {}", lineno + 1, k.trim())));
            }
        }
        let (mut mean, mut std, mut size) = (vec![3.0, -2.0], 0.0, 1024);
        let mut file = None;
        for (k, v) in &pairs {
            let t = &mut cfg.train;
            match k.as_str() {
                "seed" => t.seed = parse_value(k, v)?,
                "steps" => t.steps = parse_value(k, v)?,
                "batch_size" => t.batch_size = parse_value(k, v)?,
                "learning_rate" => t.learning_rate = parse_value(k, v)?,
                "optimizer" => t.optimizer = v.parse()?,
                "lr_schedule" => t.lr_schedule = v.parse()?,
                "minsnr_gamma" => t.minsnr_gamma = parse_value(k, v)?,
                "minsnr_variant" => t.minsnr_variant = v.parse()?,
                "terminal_clamp" => t.terminal_clamp = parse_value(k, v)?,
                "hidden" => t.hidden = parse_list(k, v)?,
                "cond_dropout" => t.cond_dropout = parse_value(k, v)?,
                "num_steps" => cfg.num_steps = parse_value(k, v)?,
                "beta_start" => cfg.beta_start = parse_value(k, v)?,
                "beta_end" => cfg.beta_end = parse_value(k, v)?,
                "ztsnr" => cfg.ztsnr = parse_value(k, v)?,
                "sigma_data" => cfg.sigma_data = parse_value(k, v)?,
                "data_mean" => mean = parse_list(k, v)?,
                "data_std" => std = parse_value(k, v)?,
                "data_size" => size = parse_value(k, v)?,
                "data" => file = Some(base_dir.join(v)),
                other => return Err(Error::Format(format!("unknown config key {other:?}"))),
            }
        }
        cfg.data = match file {
            Some(path) => ToyData::File(path),
            None => ToyData::Cluster { mean, std, size },
        };
        let mut schedule = NoiseSchedule::build_vp(cfg.num_steps, cfg.beta_start, cfg.beta_end)?;
        if cfg.ztsnr {
            schedule = schedule.rescale_to_ztsnr()?;
        }
        cfg.train.schedule = schedule;
        Ok(cfg)
    }

    pub fn sample_set(&self) -> Result<SampleSet> {
        match &self.data {
            ToyData::Cluster { mean, std, size } => SampleSet::gaussian_cluster(mean, *std, *size, self.train.seed),
            ToyData::File(path) => {
                let mut reader = csv::Reader::from_path(path)?;
                let mut points = Vec::new();
                for record in reader.records() {
                    let record = record?;
                    let row = record
                        .iter()
                        .map(|v| parse_value::<f64>("data", v.trim()))
                        .collect::<Result<Vec<_>>>()?;
                    points.push(row);
                }
                SampleSet::new(points)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON sidecar describing a model tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub input_dim: usize,
    pub cond_dim: usize,
    pub widths: Vec<usize>,
    /// Parameter blocks in the order they are concatenated in the tensor.
    pub shapes: Vec<ParamShape>,
    pub sigma_data: f64,
    pub ztsnr: bool,
    pub terminal_clamp: f64,
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub train_steps: usize,
    pub final_loss: Option<f64>,
}

pub fn manifest_path(model: &Path) -> PathBuf {
    model.with_extension("json")
}

/// Loads a model tensor and its manifest.
pub fn load_model(model: &Path) -> Result<(ToyNetwork, ModelManifest)> {
    let text = std::fs::read_to_string(manifest_path(model))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Format(format!("unknown model format {:?}", manifest.format)));
    }
    let (tensor, _) = Tensor::load(model)?;
    if tensor.dims().len() != 1 {
        return Err(Error::Format("model tensor must be one-dimensional".into()));
    }
    let net = ToyNetwork::from_params(manifest.input_dim, manifest.cond_dim, manifest.widths.clone(), tensor.into_data())?;
    let expected: Vec<ParamShape> =
        net.shapes().into_iter().map(|(name, shape)| ParamShape { name, shape }).collect();
    if expected != manifest.shapes {
        return Err(Error::Format("manifest shapes do not match the layer widths".into()));
    }
    Ok((net, manifest))
}

fn train(a: TrainToyArgs, out: &mut dyn Write) -> CliResult {
    let text = std::fs::read_to_string(&a.config).map_err(|e| Failure::Data(format!("{}: {e}", a.config.display())))?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let cfg = ToyConfig::parse(&text, base)?;
    let data = cfg.sample_set()?;
    let precond = Preconditioner::new(cfg.sigma_data)?;
    let trained = train_toy(&cfg.train, &data, &precond)?;
    let net = &trained.network;

    std::fs::create_dir_all(&a.out_dir)?;
    let model = a.out_dir.join(format!("{}.nvt", a.name));
    Tensor::new(vec![net.num_params()], net.params().to_vec())?.save(&model, DType::F64)?;
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        input_dim: net.input_dim(),
        cond_dim: net.cond_dim(),
        widths: net.widths().to_vec(),
        shapes: net.shapes().into_iter().map(|(name, shape)| ParamShape { name, shape }).collect(),
        sigma_data: cfg.sigma_data,
        ztsnr: cfg.ztsnr,
        terminal_clamp: cfg.train.terminal_clamp,
        num_steps: cfg.num_steps,
        beta_start: cfg.beta_start,
        beta_end: cfg.beta_end,
        seed: cfg.train.seed,
        train_steps: cfg.train.steps,
        final_loss: trained.losses.last().copied(),
    };
    let mut json = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    json.push('\n');
    std::fs::write(manifest_path(&model), json)?;

    let mut log = BufWriter::new(File::create(a.out_dir.join(format!("{}_loss.csv", a.name)))?);
    writeln!(log, "step,loss")?;
    for (i, l) in trained.losses.iter().enumerate() {
        writeln!(log, "{i},{}", sig9(*l))?;
    }
    log.flush()?;
    writeln!(out, "wrote {}", model.display())?;
    Ok(())
}

fn sample_toy(a: SampleToyArgs, out: &mut dyn Write) -> CliResult {
    let (net, manifest) = load_model(&a.model)?;
    let ztsnr = if a.ztsnr {
        true
    } else if a.no_ztsnr {
        false
    } else {
        manifest.ztsnr
    };
    let mut schedule = NoiseSchedule::build_vp(manifest.num_steps, manifest.beta_start, manifest.beta_end)?;
    if ztsnr {
        schedule = schedule.rescale_to_ztsnr()?;
    }
    let sigmas = schedule.sigma_view(manifest.terminal_clamp)?.inference_sigmas(a.steps)?;
    let sampler = SamplerConfig::new(sigmas, ztsnr, a.cfg, a.seed)?;
    let precond = Preconditioner::new(manifest.sigma_data)?;

    let cond: Option<Vec<f64>> = a
        .cond
        .as_deref()
        .map(|c| parse_list("cond", c).map_err(|e| Failure::Usage(e.to_string())))
        .transpose()?;
    if cond.as_ref().is_some_and(|c| c.len() != manifest.cond_dim) {
        return Err(Failure::Usage(format!("--cond needs {} values", manifest.cond_dim)));
    }
    let uncond = vec![0.0; manifest.cond_dim];
    let conditioning = Conditioning {
        cond: cond.as_deref(),
        uncond: if manifest.cond_dim > 0 { Some(&uncond) } else { None },
    };

    let dim = manifest.input_dim;
    let header: Vec<String> = (0..dim).map(|d| format!("dim{d}")).collect();
    if let Some(path) = &a.intermediates {
        let (_, trace) = sample_with_trace(&sampler, &precond, &net, dim, conditioning)?;
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,sigma,{}", header.join(","))?;
        for t in &trace {
            let vals: Vec<String> = t.denoised.iter().map(|v| sig9(*v)).collect();
            writeln!(w, "{},{},{}", t.step, sig9(t.sigma), vals.join(","))?;
        }
        w.flush()?;
    }
    let samples = sample_batch(&sampler, &precond, &net, dim, a.count, conditioning)?;
    emit(a.output.as_deref(), out, |w| {
        writeln!(w, "{}", header.join(","))?;
        for s in &samples {
            let vals: Vec<String> = s.iter().map(|v| sig9(*v)).collect();
            writeln!(w, "{}", vals.join(","))?;
        }
        Ok(())
    })
}

fn demo(a: DemoArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = LeakageConfig::default();
    if let Some(s) = a.train_steps {
        cfg.train.steps = s;
    }
    if let Some(n) = a.samples {
        cfg.num_samples = n;
    }
    if a.runs == 0 {
        return Err(Failure::Usage("--runs must be at least 1".into()));
    }
    let results = (a.seed..a.seed + a.runs)
        .map(|seed| run_leakage_experiment(&cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let dims = cfg.data_mean.len();
    emit(a.output.as_deref(), out, |w| {
        let mut header = vec!["seed".to_string(), "ztsnr_mean_error".into(), "no_ztsnr_mean_error".into()];
        header.extend((0..dims).map(|d| format!("ztsnr_mean{d}")));
        header.extend((0..dims).map(|d| format!("no_ztsnr_mean{d}")));
        writeln!(w, "{}", header.join(","))?;
        for r in &results {
            let mut row = vec![r.seed.to_string(), sig9(r.ztsnr.relative_error), sig9(r.no_ztsnr.relative_error)];
            row.extend(r.ztsnr.sample_mean.iter().map(|v| sig9(*v)));
            row.extend(r.no_ztsnr.sample_mean.iter().map(|v| sig9(*v)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })
}

fn plot(a: PlotArgs, out: &mut dyn Write) -> CliResult {
    if !a.labels.is_empty() && a.labels.len() != a.inputs.len() {
        return Err(Failure::Usage("give one --label per --input".into()));
    }
    let mut inputs = Vec::new();
    for (i, path) in a.inputs.iter().enumerate() {
        let label = a.labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
        });
        inputs.push((label, open(path)?));
    }
    let svg = plot_from_csv(inputs)?.to_svg();
    std::fs::write(&a.output, svg)?;
    writeln!(out, "wrote {}", a.output.display())?;
    Ok(())
}
