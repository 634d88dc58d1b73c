mod common;

use std::collections::{BTreeMap, BTreeSet};

use noisekit::bucketing::{plan_epoch, BatchBucket, ManifestEntry};
use noisekit::fmt::sig9;
use noisekit::precond::RawNetwork;
use noisekit::sampler::{euler_step, sample, Conditioning};
use noisekit::schedule::{scale_sigma_max_for_resolution, NoiseSchedule, DEFAULT_TERMINAL_CLAMP};
use noisekit::stats::Welford;
use noisekit::tensor::DType;
use noisekit::train::{minsnr_weight, tag_loss_weights, train_toy, weighted_loss, Example, MinSnrVariant, SampleSet, TrainConfig};
use noisekit::{Preconditioner, SamplerConfig, Tensor, ToyNetwork};
use proptest::prelude::*;

fn schedule_params() -> impl Strategy<Value = (usize, f64, f64)> {
    (2usize..1200, 1e-5f64..0.01, 0.0f64..0.03).prop_map(|(n, start, extra)| (n, start, start + extra))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rescale_pins_endpoints((n, start, end) in schedule_params()) {
        let s = NoiseSchedule::build_vp(n, start, end).unwrap();
        let z = s.rescale_to_ztsnr().unwrap();
        prop_assert_eq!(z.alpha_bars()[0], s.alpha_bars()[0]);
        prop_assert_eq!(z.alpha_bars()[n - 1], 0.0);
        prop_assert!(z.is_ztsnr());
        prop_assert!(z.rescale_to_ztsnr().is_err());
    }

    #[test]
    fn sigma_view_is_a_sampling_order(
        (n, start, end) in schedule_params(),
        ztsnr in any::<bool>(),
        clamp in 100.0f64..50_000.0,
    ) {
        let mut s = NoiseSchedule::build_vp(n, start, end).unwrap();
        if ztsnr {
            s = s.rescale_to_ztsnr().unwrap();
        }
        let view = s.sigma_view(clamp).unwrap();
        let sigmas: Vec<f64> = view.entries().iter().map(|e| e.sigma).collect();
        prop_assert!(sigmas.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(sigmas.iter().all(|s| s.is_finite() && *s > 0.0 && *s <= clamp));
        let snrs: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s)).collect();
        prop_assert!(snrs.windows(2).all(|w| w[0] < w[1]));
        if ztsnr {
            prop_assert_eq!(sigmas[0], clamp);
        }
    }

    #[test]
    fn inference_sigmas_are_a_subsequence(
        (n, start, end) in schedule_params(),
        ztsnr in any::<bool>(),
        frac in 0.0f64..1.0,
    ) {
        let mut s = NoiseSchedule::build_vp(n, start, end).unwrap();
        if ztsnr {
            s = s.rescale_to_ztsnr().unwrap();
        }
        let view = s.sigma_view(DEFAULT_TERMINAL_CLAMP).unwrap();
        let steps = 2 + ((view.entries().len() - 2) as f64 * frac) as usize;
        let inf = view.inference_sigmas(steps).unwrap();
        let all = view.sigmas();
        let picked = inf.sigmas();
        prop_assert_eq!(picked.len(), steps + 1);
        prop_assert_eq!(*picked.last().unwrap(), 0.0);
        prop_assert_eq!(picked[0], all[0]);
        let mut cursor = 0;
        for p in &picked[..steps] {
            let found = all[cursor..].iter().position(|a| a == p);
            prop_assert!(found.is_some());
            cursor += found.unwrap() + 1;
        }
    }

    #[test]
    fn sigma_max_scales_with_side_length(sigma in 0.1f64..100.0, area in 1.0f64..1e7, k in 0.1f64..10.0) {
        let scaled = scale_sigma_max_for_resolution(sigma, area, area * k * k).unwrap();
        prop_assert!((scaled - sigma * k).abs() <= 1e-12 * sigma * k);
    }

    #[test]
    fn scalings_identity(log_sigma in -3.0f64..4.31, sigma_data in 0.1f64..3.0) {
        let sigma = 10f64.powf(log_sigma);
        let p = Preconditioner::new(sigma_data).unwrap();
        let s = p.scalings(sigma).unwrap();
        prop_assert!((s.c_skip - s.c_out * (sigma / sigma_data) * s.c_in - 1.0).abs() < 1e-9);
    }

    #[test]
    fn denoise_inverts_training_target(
        x0 in prop::collection::vec(-5.0f64..5.0, 1..6),
        log_sigma in -3.0f64..4.31,
        seed in any::<u64>(),
    ) {
        let sigma = 10f64.powf(log_sigma);
        let p = Preconditioner::default();
        let noise: Vec<f64> = x0.iter().enumerate().map(|(i, _)| ((seed.wrapping_add(i as u64) % 1000) as f64 / 250.0) - 2.0).collect();
        let x: Vec<f64> = x0.iter().zip(&noise).map(|(a, n)| a + sigma * n).collect();
        let target = p.training_target(&x0, &x, sigma).unwrap();
        let echo = move |_: &[f64], _: f64, _: Option<&[f64]>| target.clone();
        let d = p.denoise(&echo, &x, sigma, None).unwrap();
        for (a, b) in d.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn euler_step_endpoints(
        x in prop::collection::vec(-10.0f64..10.0, 1..5),
        from in 0.01f64..100.0,
        frac in 0.0f64..0.99,
    ) {
        let d: Vec<f64> = x.iter().map(|v| v * 0.5 - 1.0).collect();
        prop_assert_eq!(euler_step(&x, &d, from, 0.0).unwrap(), d.clone());
        let fixed = euler_step(&x, &x, from, from * frac).unwrap();
        prop_assert_eq!(fixed, x.clone());
        prop_assert!(euler_step(&x, &d, from, from * 1.5).is_err());
    }

    #[test]
    fn minsnr_bounds_and_monotonicity(snr in 0.0f64..1e6, g1 in 0.01f64..50.0, dg in 0.0f64..50.0) {
        for variant in [MinSnrVariant::Standard, MinSnrVariant::ZtsnrSafe] {
            let a = minsnr_weight(snr, g1, variant);
            let b = minsnr_weight(snr, g1 + dg, variant);
            prop_assert!(a <= b);
            prop_assert!(a <= 1.0);
            match variant {
                MinSnrVariant::Standard => prop_assert!(a >= 0.0),
                MinSnrVariant::ZtsnrSafe => prop_assert!(a > 0.0),
            }
        }
    }

    #[test]
    fn tag_weights_ignore_dataset_duplication(
        tags in prop::collection::vec(prop::collection::vec(0usize..6, 0..4), 1..40),
        alpha in 0.0f64..1.0,
    ) {
        let make = |copies: usize| -> Vec<ManifestEntry> {
            (0..copies)
                .flat_map(|c| {
                    tags.iter().enumerate().map(move |(i, ts)| ManifestEntry {
                        id: format!("{c}-{i}"),
                        width: 512,
                        height: 512,
                        tags: BTreeMap::from([
                            ("general".to_string(), ts.iter().map(|t| format!("g{t}")).collect()),
                            ("artist".to_string(), ts.iter().take(1).map(|t| format!("a{}", t % 3)).collect()),
                        ]),
                    })
                })
                .collect()
        };
        let once = tag_loss_weights(&make(1), alpha, (0.1, 10.0)).unwrap();
        let twice = tag_loss_weights(&make(2), alpha, (0.1, 10.0)).unwrap();
        for i in 0..tags.len() {
            let w = once[&format!("0-{i}")];
            let (first, second) = (twice[&format!("0-{i}")], twice[&format!("1-{i}")]);
            prop_assert!((w - first).abs() < 1e-12);
            prop_assert!((w - second).abs() < 1e-12);
            prop_assert!((0.1..=10.0).contains(&w));
        }
    }

    #[test]
    fn welford_merge_is_associative_and_order_free(
        xs in prop::collection::vec(-1e3f64..1e3, 3..200),
        cut in (0.0f64..1.0, 0.0f64..1.0),
    ) {
        let (i, j) = {
            let a = (cut.0 * xs.len() as f64) as usize;
            let b = (cut.1 * xs.len() as f64) as usize;
            (a.min(b), a.max(b))
        };
        let acc = |s: &[f64]| {
            let mut w = Welford::default();
            s.iter().for_each(|&x| w.push(x));
            w
        };
        let (a, b, c) = (acc(&xs[..i]), acc(&xs[i..j]), acc(&xs[j..]));
        let mut left = a;
        left.merge(&b);
        left.merge(&c);
        let mut right = b;
        right.merge(&c);
        let mut right_total = a;
        right_total.merge(&right);
        let whole = acc(&xs);
        let mut reversed: Vec<f64> = xs.clone();
        reversed.reverse();
        let rev = acc(&reversed);
        for w in [left, right_total, rev] {
            prop_assert_eq!(w.count, whole.count);
            prop_assert!((w.mean - whole.mean).abs() <= 1e-9 * (1.0 + whole.mean.abs()));
            prop_assert!((w.variance() - whole.variance()).abs() <= 1e-9 * (1.0 + whole.variance()));
        }
    }

    #[test]
    fn tensor_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let len: usize = dims.iter().product();
        let data: Vec<f64> = (0..len).map(|i| ((seed as f64) * 1e-12 + i as f64).sin() * 1e3).collect();
        let t = Tensor::new(dims.clone(), data.clone()).unwrap();
        let mut bytes = Vec::new();
        t.write_to(&mut bytes, DType::F64).unwrap();
        prop_assert_eq!(bytes.len(), 4 + 2 + 4 * dims.len() + 8 * len);
        let (back, dtype) = Tensor::decode(&bytes).unwrap();
        prop_assert_eq!(dtype, DType::F64);
        prop_assert_eq!(&back, &t);
        bytes.pop();
        if len > 0 {
            prop_assert!(Tensor::decode(&bytes).is_err());
        }
        let mut bytes = Vec::new();
        t.write_to(&mut bytes, DType::F32).unwrap();
        let (back, _) = Tensor::decode(&bytes).unwrap();
        for (a, b) in back.data().iter().zip(&data) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn sig9_round_trips(x in prop::num::f64::NORMAL) {
        let s = sig9(x);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-9 * x.abs(), "{} -> {}", x, s);
        let digits = s.trim_start_matches('-').split('e').next().unwrap().replace('.', "");
        prop_assert!(digits.trim_start_matches('0').len() <= 9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn epoch_plan_partitions_items(
        sizes in prop::collection::vec(0usize..40, 1..8),
        world_size in 1usize..4,
        batch_size in 1usize..9,
        seed in any::<u64>(),
        epoch in 0u64..5,
    ) {
        let dataset = common::dataset_with_sizes(&sizes);
        let n: usize = sizes.iter().sum();
        let global = world_size * batch_size;
        let plan = plan_epoch(&dataset, epoch, world_size, batch_size, seed);
        if n < global {
            prop_assert!(plan.is_err());
            return Ok(());
        }
        let plan = plan.unwrap();
        let trimmed = n / global * global;
        prop_assert_eq!(plan.ranks.len(), world_size);
        let mut seen = BTreeSet::new();
        for rank in &plan.ranks {
            prop_assert_eq!(rank.len(), trimmed / global);
            for batch in rank {
                prop_assert_eq!(batch.items.len(), batch_size);
                for id in &batch.items {
                    prop_assert!(seen.insert(id.clone()), "duplicate {}", id);
                }
                if let BatchBucket::Bucket(b) = batch.bucket {
                    prop_assert!(batch.items.iter().all(|id| common::bucket_of(id) == b));
                    prop_assert!(batch.item_buckets.iter().all(|&ib| ib == b));
                }
            }
        }
        prop_assert_eq!(seen.len(), trimmed);
        prop_assert_eq!(plan_epoch(&dataset, epoch, world_size, batch_size, seed).unwrap(), plan);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn unit_weights_give_plain_loss(seed in any::<u64>()) {
        let net = ToyNetwork::new(2, 0, &[6], seed);
        let examples: Vec<Example> = (0..5)
            .map(|i| {
                let f = (seed.wrapping_mul(31).wrapping_add(i) % 97) as f64 / 97.0;
                Example {
                    sample: i as usize,
                    timestep: 0,
                    input: vec![f, -f],
                    sigma_cond: 1.0 + f,
                    cond: None,
                    target: vec![0.5 - f, f * f],
                    snr: 1.0,
                }
            })
            .collect();
        let (loss, _) = weighted_loss(&net, &examples, &[1.0; 5]).unwrap();
        let plain: f64 = examples
            .iter()
            .map(|e| {
                let out = net.evaluate(&e.input, e.sigma_cond, None);
                out.iter().zip(&e.target).map(|(o, t)| (o - t).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / 5.0;
        prop_assert!((loss - plain).abs() <= 1e-12 * plain.max(1.0));
        let (doubled, _) = weighted_loss(&net, &examples, &[2.0; 5]).unwrap();
        prop_assert!((doubled - 2.0 * loss).abs() <= 1e-12 * plain.max(1.0));
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), ztsnr in any::<bool>(), steps in 2usize..30) {
        let net = common::smooth_network(3);
        let p = Preconditioner::default();
        let mut base = NoiseSchedule::sdxl();
        if ztsnr {
            base = base.rescale_to_ztsnr().unwrap();
        }
        let sigmas = base.sigma_view(DEFAULT_TERMINAL_CLAMP).unwrap().inference_sigmas(steps).unwrap();
        let cfg = SamplerConfig::new(sigmas, ztsnr, 1.0, seed).unwrap();
        let a = sample(&cfg, &p, &net, 3, Conditioning::default()).unwrap();
        let b = sample(&cfg, &p, &net, 3, Conditioning::default()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn cfg_one_ignores_uncond() {
    let net = ToyNetwork::new(2, 2, &[8], 1);
    let p = Preconditioner::default();
    let sigmas = NoiseSchedule::sdxl()
        .rescale_to_ztsnr()
        .unwrap()
        .sigma_view(DEFAULT_TERMINAL_CLAMP)
        .unwrap()
        .inference_sigmas(10)
        .unwrap();
    let cfg = SamplerConfig::new(sigmas, true, 1.0, 3).unwrap();
    let cond = [0.4, -0.2];
    let with = sample(&cfg, &p, &net, 2, Conditioning { cond: Some(&cond), uncond: Some(&[0.0, 0.0]) }).unwrap();
    let without = sample(&cfg, &p, &net, 2, Conditioning { cond: Some(&cond), uncond: None }).unwrap();
    assert_eq!(with, without);
}

#[test]
fn training_is_deterministic() {
    let data = SampleSet::gaussian_cluster(&[3.0, -2.0], 1.0, 64, 0).unwrap();
    let cfg = TrainConfig { steps: 50, batch_size: 8, hidden: vec![8], seed: 11, ..TrainConfig::default() };
    let p = Preconditioner::default();
    let a = train_toy(&cfg, &data, &p).unwrap();
    let b = train_toy(&cfg, &data, &p).unwrap();
    assert_eq!(a.network, b.network);
    assert_eq!(a.losses, b.losses);
}
