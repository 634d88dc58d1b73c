#![allow(dead_code)]

use noisekit::bucketing::{BucketLayout, BucketedDataset};
use noisekit::{Preconditioner, RawNetwork, ToyNetwork};

/// A fixed, smooth network: a small randomly initialised MLP.
pub fn smooth_network(dim: usize) -> ToyNetwork {
    ToyNetwork::new(dim, 0, &[16, 16], 0xC0FFEE)
}

/// Exact denoiser for Gaussian data `N(mean, std^2 I)`, expressed as the
/// raw network output the preconditioner expects.
pub fn gaussian_posterior_network(precond: Preconditioner, mean: Vec<f64>, std: f64) -> impl RawNetwork {
    move |input: &[f64], sigma: f64, _cond: Option<&[f64]>| -> Vec<f64> {
        let s = precond.scalings(sigma).unwrap();
        let shrink = std * std / (std * std + sigma * sigma);
        input
            .iter()
            .zip(&mean)
            .map(|(u, m)| {
                let x = u / s.c_in;
                let d = m + shrink * (x - m);
                (d - s.c_skip * x) / s.c_out
            })
            .collect()
    }
}

/// A dataset whose bucket `b` holds `sizes[b]` items named `b-i`.
pub fn dataset_with_sizes(sizes: &[usize]) -> BucketedDataset {
    let layout = BucketLayout::default();
    assert!(sizes.len() <= layout.len());
    let items = sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &n)| (0..n).map(move |i| (format!("{b}-{i}"), b)))
        .collect();
    BucketedDataset::from_assignments(layout, items).unwrap()
}

pub fn bucket_of(id: &str) -> usize {
    id.split('-').next().unwrap().parse().unwrap()
}
