//! Client datasets: synthetic non-IID generation, Dirichlet label-skew
//! partitioning and the `FVD1` dataset file format.

mod format;
mod split;
mod synth;

pub use format::{
    decode_dataset, encode_dataset, load_dataset, read_assignment, save_dataset, write_assignment, Assignment,
    SplitKind,
};
pub use split::{partition_dataset, shards_from_assignment, stratified_split, MIN_PARTITION_PER_CLASS};
pub use synth::{generate_synthetic, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images stored as `[0, 1]` floats, `height × width × channels` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = height * width * channels;
        if pixels.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixels for {} samples of {per} pixels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Data(format!("label {y} of sample {i} outside [0, {num_classes})")));
        }
        Ok(Self {
            height,
            width,
            channels,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn empty_like(other: &Dataset) -> Self {
        Self {
            pixels: Vec::new(),
            labels: Vec::new(),
            ..other.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_sample(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.pixels_per_sample();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn push(&mut self, image: &[f32], label: usize) {
        debug_assert_eq!(image.len(), self.pixels_per_sample());
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty_like(self);
        for &i in indices {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }

    /// Concatenation of `parts`, which must share geometry.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Option<Dataset> {
        let mut iter = parts.into_iter();
        let mut out = iter.next()?.clone();
        for p in iter {
            out.pixels.extend_from_slice(&p.pixels);
            out.labels.extend_from_slice(&p.labels);
        }
        Some(out)
    }

    /// `[B, H, W, C]` tensor of the selected samples.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let per = self.pixels_per_sample();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), self.height, self.width, self.channels], data).expect("consistent geometry")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// One client's local data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Human-readable origin (generator parameters or file path).
    pub provenance: String,
}

/// Per-client affine intensity transform `x -> scale * x + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureShift {
    pub scale: f64,
    pub offset: f64,
}

impl FeatureShift {
    pub const IDENTITY: FeatureShift = FeatureShift { scale: 1.0, offset: 0.0 };
}

/// Heterogeneity knobs: Dirichlet label skew plus per-client intensity shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct SkewSpec {
    pub alpha: f64,
    /// One entry per client; empty means no feature shift.
    pub shifts: Vec<FeatureShift>,
    pub seed: u64,
}

impl SkewSpec {
    pub fn label_only(alpha: f64, seed: u64) -> Self {
        Self {
            alpha,
            shifts: Vec::new(),
            seed,
        }
    }

    /// Seeded shifts with scale in `[1 - strength, 1 + strength]` and
    /// offset in `[-strength, strength]`.
    pub fn with_random_shifts(alpha: f64, num_clients: usize, strength: f64, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed, &[crate::seed::tag::SHIFT]);
        let shifts = (0..num_clients)
            .map(|_| FeatureShift {
                scale: 1.0 + rng.random_range(-strength..=strength),
                offset: rng.random_range(-strength..=strength),
            })
            .collect();
        Self { alpha, shifts, seed }
    }

    pub fn shift(&self, client: usize) -> FeatureShift {
        self.shifts.get(client).copied().unwrap_or(FeatureShift::IDENTITY)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("dirichlet alpha must be positive, got {}", self.alpha)));
        }
        if let Some((j, s)) = self.shifts.iter().enumerate().find(|(_, s)| !(s.scale > 0.0)) {
            return Err(Error::Config(format!("client {j} has non-positive shift scale {}", s.scale)));
        }
        Ok(())
    }
}

/// Draws a Dirichlet(alpha, …, alpha) vector of length `k` by normalizing
/// independent Gamma(alpha, 1) draws.
pub(crate) fn dirichlet<R: rand::Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, Gamma};
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Integer counts summing to `total`, proportional to `weights`
/// (largest-remainder rounding, ties to the lower index).
pub(crate) fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}
