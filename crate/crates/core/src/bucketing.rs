//! Aspect-ratio bucketing: bucket generation, log-aspect assignment,
//! per-epoch sharding with weighted same-resolution batches, and
//! scale-and-crop geometry.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::sig9;

pub const DEFAULT_MAX_AREA: u32 = 512 * 768;
pub const DEFAULT_MAX_DIM: u32 = 1024;
pub const DEFAULT_STEP: u32 = 64;
pub const MIN_DIM: u32 = 256;
/// Log-aspect distance beyond which an image is dropped (about a 2:1 mismatch).
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.7;
const SQUARE: (u32, u32) = (512, 512);
const TIE_EPS: f64 = 1e-12;

/// One line of a JSONL dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub tags: BTreeMap<String, Vec<String>>,
}

pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?;
        if entry.width == 0 || entry.height == 0 {
            return Err(Error::Format(format!("manifest line {}: zero image dimension", lineno + 1)));
        }
        out.push(entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketLayout {
    buckets: Vec<(u32, u32)>,
    log_aspects: Vec<f64>,
    pub max_area: u32,
    pub max_dim: u32,
    pub step: u32,
}

impl Default for BucketLayout {
    fn default() -> Self {
        generate_buckets(DEFAULT_MAX_AREA, DEFAULT_MAX_DIM, DEFAULT_STEP).expect("default layout is valid")
    }
}

impl BucketLayout {
    pub fn buckets(&self) -> &[(u32, u32)] {
        &self.buckets
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn index_of(&self, bucket: (u32, u32)) -> Option<usize> {
        self.buckets.iter().position(|&b| b == bucket)
    }

    /// Writes `width,height,aspect`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "width,height,aspect")?;
        for &(w, h) in &self.buckets {
            writeln!(out, "{w},{h},{}", sig9(w as f64 / h as f64))?;
        }
        Ok(())
    }
}

/// For each width from 256 to `max_dim` in `step` increments, takes the
/// largest `step`-multiple height within `max_dim` and the area budget;
/// repeats with the axes exchanged, dedupes, adds 512x512 and sorts.
pub fn generate_buckets(max_area: u32, max_dim: u32, step: u32) -> Result<BucketLayout> {
    if step == 0 || max_area == 0 || max_dim == 0 {
        return Err(Error::param("bucket parameters must be positive"));
    }
    if !MIN_DIM.is_multiple_of(step) || !max_dim.is_multiple_of(step) {
        return Err(Error::param(format!("step {step} must divide {MIN_DIM} and max_dim {max_dim}")));
    }
    if max_dim < SQUARE.0 || (max_area as u64) < (SQUARE.0 as u64 * SQUARE.1 as u64) {
        return Err(Error::param("layout must be able to hold 512x512"));
    }
    let mut buckets = Vec::new();
    let mut width = MIN_DIM;
    while width <= max_dim {
        let height = (max_area / width).min(max_dim) / step * step;
        if height > 0 {
            buckets.push((width, height));
            buckets.push((height, width));
        }
        width += step;
    }
    buckets.push(SQUARE);
    buckets.sort_unstable();
    buckets.dedup();
    let log_aspects = buckets.iter().map(|&(w, h)| log_aspect(w, h)).collect();
    Ok(BucketLayout { buckets, log_aspects, max_area, max_dim, step })
}

fn log_aspect(w: u32, h: u32) -> f64 {
    (w as f64 / h as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assignment {
    Bucket { index: usize, distance: f64 },
    Pruned { distance: f64 },
}

impl Assignment {
    pub fn bucket(&self) -> Option<usize> {
        match *self {
            Assignment::Bucket { index, .. } => Some(index),
            Assignment::Pruned { .. } => None,
        }
    }

    pub fn distance(&self) -> f64 {
        match *self {
            Assignment::Bucket { distance, .. } | Assignment::Pruned { distance } => distance,
        }
    }
}

/// Nearest bucket by `|ln(bucket aspect) - ln(image aspect)|`, ties going to
/// the larger bucket area.
pub fn assign_bucket(layout: &BucketLayout, image: (u32, u32), prune_threshold: f64) -> Result<Assignment> {
    if image.0 == 0 || image.1 == 0 {
        return Err(Error::param("image dimensions must be positive"));
    }
    let target = log_aspect(image.0, image.1);
    let area = |i: usize| layout.buckets[i].0 as u64 * layout.buckets[i].1 as u64;
    let mut best: Option<(usize, f64)> = None;
    for (i, la) in layout.log_aspects.iter().enumerate() {
        let d = (la - target).abs();
        best = match best {
            None => Some((i, d)),
            Some((bi, bd)) if d < bd - TIE_EPS || ((d - bd).abs() <= TIE_EPS && area(i) > area(bi)) => Some((i, d)),
            keep => keep,
        };
    }
    let (index, distance) = best.ok_or_else(|| Error::param("empty bucket layout"))?;
    Ok(if distance > prune_threshold {
        Assignment::Pruned { distance }
    } else {
        Assignment::Bucket { index, distance }
    })
}

/// A manifest with every retained item mapped to its bucket.
#[derive(Debug, Clone)]
pub struct BucketedDataset {
    pub layout: BucketLayout,
    /// `(id, bucket index, log-aspect distance)` in manifest order.
    pub items: Vec<(String, usize, f64)>,
    pub pruned: Vec<String>,
}

impl BucketedDataset {
    pub fn new(manifest: &[ManifestEntry], layout: BucketLayout, prune_threshold: f64) -> Result<Self> {
        let mut items = Vec::new();
        let mut pruned = Vec::new();
        for entry in manifest {
            match assign_bucket(&layout, (entry.width, entry.height), prune_threshold)? {
                Assignment::Bucket { index, distance } => items.push((entry.id.clone(), index, distance)),
                Assignment::Pruned { .. } => pruned.push(entry.id.clone()),
            }
        }
        Ok(Self { layout, items, pruned })
    }

    /// Builds directly from precomputed bucket indices.
    pub fn from_assignments(layout: BucketLayout, items: Vec<(String, usize)>) -> Result<Self> {
        if let Some((id, b)) = items.iter().find(|(_, b)| *b >= layout.len()) {
            return Err(Error::param(format!("item {id} has bucket {b} outside the layout")));
        }
        Ok(Self {
            layout,
            items: items.into_iter().map(|(id, b)| (id, b, 0.0)).collect(),
            pruned: Vec::new(),
        })
    }

    pub fn mean_assignment_error(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().map(|i| i.2).sum::<f64>() / self.items.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchBucket {
    Bucket(usize),
    CatchAll,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub bucket: BatchBucket,
    pub items: Vec<String>,
    /// Each item's own bucket; uniform unless this is a catch-all batch.
    pub item_buckets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch: u64,
    pub world_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Batches of each rank in draw order.
    pub ranks: Vec<Vec<Batch>>,
}

#[derive(Serialize)]
struct BatchLine<'a> {
    epoch: u64,
    rank: usize,
    batch: usize,
    bucket: Option<usize>,
    catch_all: bool,
    resolution: Option<(u32, u32)>,
    items: &'a [String],
    resolutions: Vec<(u32, u32)>,
}

impl EpochPlan {
    pub fn batches_per_rank(&self) -> usize {
        self.ranks.first().map_or(0, Vec::len)
    }

    /// One JSON object per batch.
    pub fn write_jsonl<W: Write>(&self, layout: &BucketLayout, mut out: W) -> Result<()> {
        for (rank, batches) in self.ranks.iter().enumerate() {
            for (i, b) in batches.iter().enumerate() {
                let bucket = match b.bucket {
                    BatchBucket::Bucket(idx) => Some(idx),
                    BatchBucket::CatchAll => None,
                };
                let line = BatchLine {
                    epoch: self.epoch,
                    rank,
                    batch: i,
                    bucket,
                    catch_all: bucket.is_none(),
                    resolution: bucket.map(|idx| layout.buckets[idx]),
                    items: &b.items,
                    resolutions: b.item_buckets.iter().map(|&idx| layout.buckets[idx]).collect(),
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// Shuffles with `seed ^ epoch`, trims to a multiple of
/// `world_size * batch_size`, hands rank `r` the `r`-th contiguous stripe,
/// and per rank draws batches from buckets with probability proportional to
/// their remaining size. Each bucket's remainder modulo `batch_size` goes to
/// a catch-all bucket.
pub fn plan_epoch(
    dataset: &BucketedDataset,
    epoch: u64,
    world_size: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EpochPlan> {
    if world_size == 0 || batch_size == 0 {
        return Err(Error::param("world_size and batch_size must be positive"));
    }
    let global = world_size * batch_size;
    let n = dataset.items.len();
    if n < global {
        return Err(Error::param(format!(
            "{n} items cannot fill world_size * batch_size = {global}"
        )));
    }
    let epoch_seed = seed ^ epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.truncate(n / global * global);
    let stripe = order.len() / world_size;

    let ranks = order
        .chunks_exact(stripe)
        .enumerate()
        .map(|(rank, shard)| {
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
            rng.set_stream(rank as u64 + 1);
            plan_shard(dataset, shard, batch_size, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpochPlan { epoch, world_size, batch_size, seed, ranks })
}

fn plan_shard<R: Rng>(dataset: &BucketedDataset, shard: &[usize], batch_size: usize, rng: &mut R) -> Result<Vec<Batch>> {
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); dataset.layout.len()];
    for &item in shard {
        lists[dataset.items[item].1].push(item);
    }
    let mut catch_all = Vec::new();
    let mut pools: Vec<(BatchBucket, Vec<usize>)> = Vec::new();
    for (bucket, mut list) in lists.into_iter().enumerate() {
        let keep = list.len() / batch_size * batch_size;
        catch_all.extend(list.drain(keep..));
        if !list.is_empty() {
            pools.push((BatchBucket::Bucket(bucket), list));
        }
    }
    if !catch_all.is_empty() {
        pools.push((BatchBucket::CatchAll, catch_all));
    }

    let mut cursors = vec![0usize; pools.len()];
    let mut batches = Vec::with_capacity(shard.len() / batch_size);
    while !pools.is_empty() {
        let remaining: Vec<usize> = pools.iter().zip(&cursors).map(|((_, l), &c)| l.len() - c).collect();
        let pick = WeightedIndex::new(&remaining)
            .map_err(|e| Error::param(format!("bucket weights: {e}")))?
            .sample(rng);
        let (bucket, list) = &pools[pick];
        let start = cursors[pick];
        let taken = &list[start..start + batch_size];
        batches.push(Batch {
            bucket: *bucket,
            items: taken.iter().map(|&i| dataset.items[i].0.clone()).collect(),
            item_buckets: taken.iter().map(|&i| dataset.items[i].1).collect(),
        });
        cursors[pick] += batch_size;
        if cursors[pick] == list.len() {
            pools.remove(pick);
            cursors.remove(pick);
        }
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropGeometry {
    pub scaled_size: (u32, u32),
    pub crop_offset: (u32, u32),
    pub crop_size: (u32, u32),
}

/// Scales the image to cover the bucket with its aspect preserved (one side
/// exact, the other at least as long) and places a uniformly random crop
/// along the overflowing side.
pub fn fit_geometry<R: Rng + ?Sized>(image: (u32, u32), bucket: (u32, u32), rng: &mut R) -> Result<CropGeometry> {
    let (iw, ih) = (image.0 as f64, image.1 as f64);
    let (bw, bh) = bucket;
    if image.0 == 0 || image.1 == 0 || bw == 0 || bh == 0 {
        return Err(Error::param("dimensions must be positive"));
    }
    let (sx, sy) = (bw as f64 / iw, bh as f64 / ih);
    let scaled_size = if sx >= sy {
        (bw, ((ih * sx).round() as u32).max(bh))
    } else {
        (((iw * sy).round() as u32).max(bw), bh)
    };
    let crop_offset = (
        rng.random_range(0..=scaled_size.0 - bw),
        rng.random_range(0..=scaled_size.1 - bh),
    );
    Ok(CropGeometry { scaled_size, crop_offset, crop_size: bucket })
}

/// Fraction of the (unrounded) scaled image discarded by the crop.
pub fn crop_fraction(image: (u32, u32), bucket: (u32, u32)) -> f64 {
    let (iw, ih) = (image.0 as f64, image.1 as f64);
    let (bw, bh) = (bucket.0 as f64, bucket.1 as f64);
    let scale = (bw / iw).max(bh / ih);
    1.0 - (bw * bh) / (iw * scale * ih * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_members() {
        let layout = BucketLayout::default();
        for b in [(256, 1024), (448, 832), (512, 768), (576, 640), (832, 448), (1024, 384), (512, 512)] {
            assert!(layout.index_of(b).is_some(), "missing {b:?}");
        }
        for &(w, h) in layout.buckets() {
            assert!(w * h <= DEFAULT_MAX_AREA && w <= 1024 && h <= 1024);
            assert!(w % 64 == 0 && h % 64 == 0);
        }
        let mut sorted = layout.buckets().to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted, layout.buckets());
    }

    #[test]
    fn unbounded_area_gives_max_dim_edges() {
        let layout = generate_buckets(1024 * 1024, 1024, 64).unwrap();
        for &(w, h) in layout.buckets() {
            assert!(w == 1024 || h == 1024 || (w, h) == (512, 512));
        }
    }

    #[test]
    fn bad_parameters() {
        assert!(generate_buckets(DEFAULT_MAX_AREA, 1024, 0).is_err());
        assert!(generate_buckets(DEFAULT_MAX_AREA, 1024, 48).is_err());
        assert!(generate_buckets(DEFAULT_MAX_AREA, 1000, 64).is_err());
        assert!(generate_buckets(256 * 256, 1024, 64).is_err());
    }

    #[test]
    fn assignment_examples() {
        let layout = BucketLayout::default();
        let a = assign_bucket(&layout, (1920, 1080), DEFAULT_PRUNE_THRESHOLD).unwrap();
        assert_eq!(layout.buckets()[a.bucket().unwrap()], (832, 448));
        let a = assign_bucket(&layout, (512, 512), DEFAULT_PRUNE_THRESHOLD).unwrap();
        assert_eq!(layout.buckets()[a.bucket().unwrap()], (512, 512));
        assert_eq!(a.distance(), 0.0);
        assert!(matches!(assign_bucket(&layout, (4000, 100), 0.7).unwrap(), Assignment::Pruned { .. }));
        assert!(assign_bucket(&layout, (0, 100), 0.7).is_err());
    }

    #[test]
    fn tie_prefers_larger_area() {
        // 1:1 is equidistant from 2:1 and 1:2 at equal area; add a smaller 2:1
        let mut layout = generate_buckets(DEFAULT_MAX_AREA, 1024, 64).unwrap();
        layout.buckets = vec![(256, 128), (512, 256), (256, 512)];
        layout.log_aspects = layout.buckets.iter().map(|&(w, h)| log_aspect(w, h)).collect();
        let a = assign_bucket(&layout, (300, 300), 10.0).unwrap();
        assert_eq!(a.bucket(), Some(1));
    }

    #[test]
    fn geometry_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = fit_geometry((1024, 1024), (512, 768), &mut rng).unwrap();
        assert_eq!(g.scaled_size, (768, 768));
        assert!(g.crop_offset.0 <= 256);
        assert_eq!(g.crop_offset.1, 0);
        assert_eq!(g.crop_size, (512, 768));

        let g = fit_geometry((1024, 1536), (512, 768), &mut rng).unwrap();
        assert_eq!(g.scaled_size, (512, 768));
        assert_eq!(g.crop_offset, (0, 0));
    }

    #[test]
    fn small_single_bucket_epoch() {
        let layout = BucketLayout::default();
        let items = (0..8).map(|i| (format!("i{i}"), 3)).collect();
        let ds = BucketedDataset::from_assignments(layout, items).unwrap();
        let plan = plan_epoch(&ds, 0, 2, 4, 9).unwrap();
        assert_eq!(plan.ranks.len(), 2);
        for rank in &plan.ranks {
            assert_eq!(rank.len(), 1);
            assert_eq!(rank[0].items.len(), 4);
            assert_eq!(rank[0].bucket, BatchBucket::Bucket(3));
        }
        assert!(plan_epoch(&ds, 0, 3, 4, 9).is_err());
    }

    #[test]
    fn reads_manifest_lines() {
        let text = "{\"id\": \"a\", \"width\": 10, \"height\": 20, \"tags\": {\"artist\": [\"x\"]}}\n\n{\"id\": \"b\", \"width\": 5, \"height\": 5}\n";
        let m = read_manifest(text.as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].tags["artist"], vec!["x".to_string()]);
        assert!(m[1].tags.is_empty());
        assert!(read_manifest("{\"id\": \"a\"}".as_bytes()).is_err());
        assert!(read_manifest("{\"id\": \"a\", \"width\": 0, \"height\": 1}".as_bytes()).is_err());
    }
}
