//! Streaming per-channel statistics and latent scale-and-shift.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::tensor::Tensor;

/// Reciprocal-std scale factor conventionally used with the SD1 VAE.
pub const SD1_SCALE: f64 = 0.18215;
/// Reciprocal-std scale factor conventionally used with the SDXL VAE.
pub const SDXL_SCALE: f64 = 0.13025;
/// Per-channel means of SDXL-VAE latents of anime illustrations.
pub const ANIME_SDXL_MEANS: [f64; 4] = [4.8119, 0.1607, 1.3538, -1.7753];
/// Per-channel stds of SDXL-VAE latents of anime illustrations.
pub const ANIME_SDXL_STDS: [f64; 4] = [9.9181, 6.2753, 7.5978, 5.9956];

/// Welford accumulator for one stream.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Combines two disjoint streams (Chan et al.).
    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        self.mean += delta * nb / n as f64;
        self.m2 += other.m2 + delta * delta * na * nb / n as f64;
        self.count = n;
    }

    /// Sample variance, `m2 / (n - 1)`; zero below two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    channels: Vec<Welford>,
}

/// Channel axis used when none is given: 1 for NCHW, 0 otherwise.
pub fn default_channel_axis(rank: usize) -> usize {
    if rank == 4 {
        1
    } else {
        0
    }
}

/// `(outer, channels, inner)` extents around `axis`.
fn split_dims(dims: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return Err(Error::param(format!("channel axis {axis} out of range for rank {}", dims.len())));
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

impl ChannelStats {
    pub fn new(channels: usize) -> Self {
        Self { channels: vec![Welford::default(); channels] }
    }

    pub fn from_parts(channels: Vec<Welford>) -> Self {
        Self { channels }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &Welford {
        &self.channels[c]
    }

    pub fn means(&self) -> Vec<f64> {
        self.channels.iter().map(|w| w.mean).collect()
    }

    pub fn stds(&self) -> Vec<f64> {
        self.channels.iter().map(Welford::std).collect()
    }

    pub fn push(&mut self, channel: usize, x: f64) {
        self.channels[channel].push(x);
    }

    /// Feeds every element of `batch` into its channel's accumulator.
    pub fn welford_update(&mut self, batch: &Tensor, channel_axis: usize) -> Result<()> {
        let (outer, channels, inner) = split_dims(batch.dims(), channel_axis)?;
        if channels != self.channels.len() {
            return Err(Error::ChannelMismatch { expected: self.channels.len(), got: channels });
        }
        let data = batch.data();
        for o in 0..outer {
            for (c, acc) in self.channels.iter_mut().enumerate() {
                let start = (o * channels + c) * inner;
                data[start..start + inner].iter().for_each(|&x| acc.push(x));
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ChannelStats) -> Result<()> {
        if other.channels.len() != self.channels.len() {
            return Err(Error::ChannelMismatch { expected: self.channels.len(), got: other.channels.len() });
        }
        self.channels.iter_mut().zip(&other.channels).for_each(|(a, b)| a.merge(b));
        Ok(())
    }

    pub fn scaling(&self) -> Result<LatentScaling> {
        LatentScaling::per_channel(self.means(), self.stds())
    }

    /// Writes `channel,mean,std,count`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "channel,mean,std,count")?;
        for (c, w) in self.channels.iter().enumerate() {
            writeln!(out, "{c},{},{},{}", sig9(w.mean), sig9(w.std()), w.count)?;
        }
        Ok(())
    }
}

/// Maps latents to the model's distribution and back.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentScaling {
    /// `(x - mean_c) / std_c` per channel.
    PerChannel { means: Vec<f64>, stds: Vec<f64> },
    /// Multiply by a single scale factor.
    Legacy(f64),
}

impl LatentScaling {
    pub fn per_channel(means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if means.len() != stds.len() {
            return Err(Error::ChannelMismatch { expected: means.len(), got: stds.len() });
        }
        if let Some(c) = stds.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::DegenerateChannel(c));
        }
        Ok(Self::PerChannel { means, stds })
    }

    pub fn anime_sdxl() -> Self {
        Self::PerChannel { means: ANIME_SDXL_MEANS.to_vec(), stds: ANIME_SDXL_STDS.to_vec() }
    }

    /// Reads the `channel,mean,std,count` CSV written by [`ChannelStats::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Format(format!("stats CSV lacks a {name} column")))
        };
        let (ci, mi, si) = (col("channel")?, col("mean")?, col("std")?);
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let parse = |i: usize| -> Result<f64> {
                record[i].trim().parse().map_err(|_| Error::Format(format!("bad number {:?}", &record[i])))
            };
            rows.push((parse(ci)? as usize, parse(mi)?, parse(si)?));
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return Err(Error::Format("stats CSV channels must be 0..n without gaps".into()));
        }
        Self::per_channel(rows.iter().map(|r| r.1).collect(), rows.iter().map(|r| r.2).collect())
    }

    fn apply(&self, x: &Tensor, channel_axis: usize, forward: bool) -> Result<Tensor> {
        let mut out = x.clone();
        match self {
            LatentScaling::Legacy(scale) => {
                let f = if forward { *scale } else { 1.0 / scale };
                out.data_mut().iter_mut().for_each(|v| *v *= f);
            }
            LatentScaling::PerChannel { means, stds } => {
                let (outer, channels, inner) = split_dims(x.dims(), channel_axis)?;
                if channels != means.len() {
                    return Err(Error::ChannelMismatch { expected: means.len(), got: channels });
                }
                let data = out.data_mut();
                for o in 0..outer {
                    for c in 0..channels {
                        let start = (o * channels + c) * inner;
                        for v in &mut data[start..start + inner] {
                            *v = if forward { (*v - means[c]) / stds[c] } else { *v * stds[c] + means[c] };
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Latent space to model space.
    pub fn normalize(&self, x: &Tensor, channel_axis: usize) -> Result<Tensor> {
        self.apply(x, channel_axis, true)
    }

    /// Model space back to latent space.
    pub fn denormalize(&self, x: &Tensor, channel_axis: usize) -> Result<Tensor> {
        self.apply(x, channel_axis, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_stream() {
        let mut w = Welford::default();
        [1.0, 2.0, 3.0].into_iter().for_each(|x| w.push(x));
        assert_eq!(w.mean, 2.0);
        assert_eq!(w.std(), 1.0);
        assert_eq!(Welford::default().variance(), 0.0);
    }

    #[test]
    fn merge_integer_streams() {
        let a = [3.0, 7.0, 1.0, 5.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        let (mut wa, mut wb, mut all) = (Welford::default(), Welford::default(), Welford::default());
        a.iter().for_each(|&x| wa.push(x));
        b.iter().for_each(|&x| wb.push(x));
        a.iter().chain(&b).for_each(|&x| all.push(x));
        wa.merge(&wb);
        assert_eq!(wa.count, all.count);
        assert_eq!(wa.mean, all.mean);
        assert_eq!(wa.m2, all.m2);
        let mut empty = Welford::default();
        empty.merge(&all);
        assert_eq!(empty, all);
    }

    #[test]
    fn per_channel_update() {
        // [2 channels, 3 values]
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 10.0, 10.0, 10.0]).unwrap();
        let mut s = ChannelStats::new(2);
        s.welford_update(&t, 0).unwrap();
        assert_eq!(s.means(), vec![2.0, 10.0]);
        assert_eq!(s.stds(), vec![1.0, 0.0]);
        assert!(matches!(s.scaling(), Err(Error::DegenerateChannel(1))));
        assert!(matches!(ChannelStats::new(3).welford_update(&t, 0), Err(Error::ChannelMismatch { .. })));
        assert!(s.welford_update(&t, 2).is_err());
    }

    #[test]
    fn nchw_axis() {
        // N=2, C=2, H=1, W=2
        let t = Tensor::new(vec![2, 2, 1, 2], vec![0.0, 2.0, 5.0, 5.0, 4.0, 6.0, 5.0, 5.0]).unwrap();
        let mut s = ChannelStats::new(2);
        s.welford_update(&t, default_channel_axis(4)).unwrap();
        assert_eq!(s.means(), vec![3.0, 5.0]);
        assert_eq!(s.channel(0).count, 4);
    }

    #[test]
    fn reference_table() {
        let mean_std = ANIME_SDXL_STDS.iter().sum::<f64>() / 4.0;
        assert!((mean_std - 7.4467).abs() < 1e-4);
        assert!((1.0 / mean_std - 0.1343).abs() < 1e-4);
    }

    #[test]
    fn legacy_scaling() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 8.0]).unwrap();
        for scale in [SD1_SCALE, SDXL_SCALE] {
            let s = LatentScaling::Legacy(scale);
            let n = s.normalize(&x, 0).unwrap();
            assert_eq!(n.data()[0], scale);
            let back = s.denormalize(&n, 0).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut s = ChannelStats::new(2);
        [1.0, 2.0, 4.0].into_iter().for_each(|x| s.push(0, x));
        [-1.0, 1.0].into_iter().for_each(|x| s.push(1, x));
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("channel,mean,std,count\n0,2.33333333,"));
        let scaling = LatentScaling::read_csv(buf.as_slice()).unwrap();
        match scaling {
            LatentScaling::PerChannel { means, stds } => {
                assert!((means[0] - 7.0 / 3.0).abs() < 1e-8);
                assert!((stds[1] - 2f64.sqrt()).abs() < 1e-8);
            }
            _ => unreachable!(),
        }
        assert!(LatentScaling::read_csv("channel,mean\n0,1\n".as_bytes()).is_err());
    }
}
