use noisekit::sampler::{sample_batch, Conditioning};
use noisekit::schedule::{NoiseSchedule, DEFAULT_TERMINAL_CLAMP};
use noisekit::train::{train_toy, SampleSet, TrainConfig};
use noisekit::{Preconditioner, SamplerConfig};

fn sample_mean(schedule: NoiseSchedule, seed: u64) -> Vec<f64> {
    let ztsnr = schedule.is_ztsnr();
    let data = SampleSet::gaussian_cluster(&[3.0, -2.0], 0.0, 256, seed).unwrap();
    let precond = Preconditioner::default();
    let cfg = TrainConfig { schedule: schedule.clone(), seed, ..TrainConfig::default() };
    let trained = train_toy(&cfg, &data, &precond).unwrap();
    let sigmas = schedule.sigma_view(DEFAULT_TERMINAL_CLAMP).unwrap().inference_sigmas(28).unwrap();
    let sampler = SamplerConfig::new(sigmas, ztsnr, 1.0, seed).unwrap();
    let samples = sample_batch(&sampler, &precond, &trained.network, 2, 1000, Conditioning::default()).unwrap();
    (0..2).map(|d| samples.iter().map(|s| s[d]).sum::<f64>() / samples.len() as f64).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Default training (2000 steps) on a point mass at (3, -2).
#[test]
fn point_mass_ztsnr_recovers_mean() {
    let target = [3.0, -2.0];
    for seed in [0, 1] {
        let z = sample_mean(NoiseSchedule::sdxl().rescale_to_ztsnr().unwrap(), seed);
        let err = norm(&[z[0] - target[0], z[1] - target[1]]) / norm(&target);
        let plain = sample_mean(NoiseSchedule::sdxl(), seed);
        println!("seed {seed}: ztsnr {z:?} err {err:.4}, plain {plain:?}");
        assert!(err < 0.1, "ztsnr mean {z:?}");
        assert!(norm(&plain) < norm(&z), "plain {plain:?} vs ztsnr {z:?}");
    }
}
