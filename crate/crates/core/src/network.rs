//! A small fully-connected denoiser with a hand-written backward pass.
//!
//! Input features are `[x, cond, ln(sigma) / 10]`; hidden layers use SiLU
//! and the output layer is linear. Parameters live in one flat buffer,
//! laid out layer by layer as `weights (out x in, row-major), bias (out)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::precond::RawNetwork;

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork {
    input_dim: usize,
    cond_dim: usize,
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Pre-activations and activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

pub fn sigma_feature(sigma: f64) -> f64 {
    sigma.ln() / 10.0
}

impl ToyNetwork {
    /// LeCun-normal weights, zero biases.
    pub fn new(input_dim: usize, cond_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut widths = vec![input_dim + cond_dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(input_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = StandardNormal.sample(&mut rng);
                params.push(scale * z);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { input_dim, cond_dim, widths, params }
    }

    pub fn from_params(input_dim: usize, cond_dim: usize, widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths[0] != input_dim + cond_dim + 1 || *widths.last().unwrap() != input_dim {
            return Err(Error::Format(format!(
                "widths {widths:?} do not fit input_dim {input_dim} and cond_dim {cond_dim}"
            )));
        }
        let expected = Self::count_params(&widths);
        if params.len() != expected {
            return Err(Error::Format(format!("expected {expected} parameters, got {}", params.len())));
        }
        Ok(Self { input_dim, cond_dim, widths, params })
    }

    fn count_params(widths: &[usize]) -> usize {
        widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(name, shape)` of every parameter block in buffer order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.widths
            .windows(2)
            .enumerate()
            .flat_map(|(l, p)| {
                [
                    (format!("layer{l}.weight"), vec![p[1], p[0]]),
                    (format!("layer{l}.bias"), vec![p[1]]),
                ]
            })
            .collect()
    }

    pub fn features(&self, input: &[f64], sigma: f64, cond: Option<&[f64]>) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.widths[0]);
        f.extend_from_slice(input);
        match cond {
            Some(c) => f.extend_from_slice(c),
            None => f.extend(std::iter::repeat_n(0.0, self.cond_dim)),
        }
        f.push(sigma_feature(sigma));
        f
    }

    fn check_inputs(&self, input: &[f64], cond: Option<&[f64]>) -> Result<()> {
        if input.len() != self.input_dim {
            return Err(Error::ShapeMismatch { expected: self.input_dim, got: input.len() });
        }
        if let Some(c) = cond {
            if c.len() != self.cond_dim {
                return Err(Error::ShapeMismatch { expected: self.cond_dim, got: c.len() });
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64], sigma: f64, cond: Option<&[f64]>) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_inputs(input, cond)?;
        let mut a = self.features(input, sigma, cond);
        let mut cache = ForwardCache { activations: Vec::new(), pre: Vec::new() };
        let layers = self.widths.len() - 1;
        let mut offset = 0;
        for (l, pair) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[o]
                })
                .collect();
            let next = if l + 1 == layers { z.clone() } else { z.iter().map(|&v| silu(v)).collect() };
            cache.activations.push(std::mem::replace(&mut a, next));
            cache.pre.push(z);
        }
        Ok((a, cache))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let mut offsets = Vec::with_capacity(self.widths.len() - 1);
        let mut offset = 0;
        for p in self.widths.windows(2) {
            offsets.push(offset);
            offset += p[0] * p[1] + p[1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..self.widths.len() - 1).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let base = offsets[l];
            let a = &cache.activations[l];
            for o in 0..n_out {
                let d = delta[o];
                let row = &mut grads[base + o * n_in..base + (o + 1) * n_in];
                for (g, ai) in row.iter_mut().zip(a) {
                    *g += d * ai;
                }
                grads[base + n_in * n_out + o] += d;
            }
            if l > 0 {
                let w = &self.params[base..base + n_in * n_out];
                let z = &cache.pre[l - 1];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|o| w[o * n_in + i] * delta[o]).sum();
                        back * silu_grad(z[i])
                    })
                    .collect();
            }
        }
    }

    /// `weight * |F(input) - target|^2`, accumulating its gradient into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_loss(
        &self,
        input: &[f64],
        sigma: f64,
        cond: Option<&[f64]>,
        target: &[f64],
        weight: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        let (out, cache) = self.forward(input, sigma, cond)?;
        if target.len() != out.len() {
            return Err(Error::ShapeMismatch { expected: out.len(), got: target.len() });
        }
        let resid: Vec<f64> = out.iter().zip(target).map(|(o, t)| o - t).collect();
        let loss = weight * resid.iter().map(|r| r * r).sum::<f64>();
        let grad_out: Vec<f64> = resid.iter().map(|r| 2.0 * weight * r).collect();
        self.backward(&cache, &grad_out, grads);
        Ok(loss)
    }
}

impl RawNetwork for ToyNetwork {
    /// # Panics
    /// On input or condition length mismatch.
    fn evaluate(&self, input: &[f64], sigma: f64, cond: Option<&[f64]>) -> Vec<f64> {
        match self.forward(input, sigma, cond) {
            Ok((out, _)) => out,
            Err(e) => panic!("toy network evaluated with bad shapes: {e}"),
        }
    }
}
