use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{apportion, dirichlet, split::stratified_split, ClientShard, Dataset, SkewSpec};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

/// Synthetic multi-client image classification task.
///
/// Each class has a fixed random low-frequency template; a sample is
/// `0.5 + amplitude * template + N(0, noise_std)`, then the client's affine
/// intensity shift, then clamping to `[0, 1]` and 8-bit quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_clients: usize,
    pub per_client_n: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub skew: SkewSpec,
    pub template_amplitude: f64,
    pub noise_std: f64,
    /// Floor on every client's per-class count after Dirichlet rounding.
    pub min_per_class: usize,
    pub test_fraction: f64,
}

impl SyntheticSpec {
    pub fn new(num_clients: usize, per_client_n: usize, image_size: usize, num_classes: usize, skew: SkewSpec) -> Self {
        Self {
            num_clients,
            per_client_n,
            image_size,
            num_classes,
            skew,
            template_amplitude: 0.08,
            noise_std: 0.3,
            min_per_class: 10,
            test_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("clients", self.num_clients),
            ("n", self.per_client_n),
            ("image_size", self.image_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.template_amplitude >= 0.0) {
            return Err(Error::Config("noise_std and template_amplitude must be non-negative".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        self.skew.validate()
    }
}

const TEMPLATE_WAVES: usize = 4;

/// Unit-peak sums of low-frequency cosines, one per class.
fn class_templates(size: usize, classes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed, &[tag::TEMPLATES]);
    (0..classes)
        .map(|_| {
            let waves: Vec<(f64, f64, f64, f64)> = (0..TEMPLATE_WAVES)
                .map(|_| {
                    let (fy, fx) = loop {
                        let f = (rng.random_range(0..3u32) as f64, rng.random_range(0..3u32) as f64);
                        if f != (0.0, 0.0) {
                            break f;
                        }
                    };
                    (fy, fx, rng.random_range(-1.0..1.0), rng.random_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            let mut t: Vec<f64> = (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size) as f64, (i % size) as f64);
                    waves
                        .iter()
                        .map(|&(fy, fx, a, phi)| {
                            a * (std::f64::consts::TAU * (fy * y + fx * x) / size as f64 + phi).cos()
                        })
                        .sum()
                })
                .collect();
            let peak = t.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            t.iter_mut().for_each(|v| *v /= peak);
            t
        })
        .collect()
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Per-class counts for one client: Dirichlet proportions, largest-remainder
/// rounding, then every class lifted to `floor` by taking from the largest.
fn client_class_counts<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Vec<usize>> {
    let c = spec.num_classes;
    if spec.per_client_n < c * spec.min_per_class {
        return Err(Error::Data(format!(
            "class starvation: {} samples cannot give {} classes at least {} each",
            spec.per_client_n, c, spec.min_per_class
        )));
    }
    let props = dirichlet(spec.skew.alpha, c, rng);
    let mut counts = apportion(&props, spec.per_client_n);
    for k in 0..c {
        while counts[k] < spec.min_per_class {
            let donor = (0..c).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    Ok(counts)
}

/// Deterministic non-IID shards; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let seed = spec.skew.seed;
    let size = spec.image_size;
    let templates = class_templates(size, spec.num_classes, seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut prop_rng = seed::rng(seed, &[tag::PROPORTIONS]);
    let mut shards = Vec::with_capacity(spec.num_clients);
    for client in 0..spec.num_clients {
        let counts = client_class_counts(spec, &mut prop_rng)?;
        let shift = spec.skew.shift(client);
        let mut rng = seed::rng(seed, &[tag::SAMPLES, client as u64]);
        let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        labels.shuffle(&mut rng);
        let mut pixels = Vec::with_capacity(labels.len() * size * size);
        for &y in &labels {
            for &t in &templates[y] {
                let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let v = 0.5 + spec.template_amplitude * t + eps;
                pixels.push(quantize(shift.scale * v + shift.offset));
            }
        }
        let all = Dataset::new(size, size, 1, spec.num_classes, pixels, labels)?;
        let mut split_rng = seed::rng(seed, &[tag::SPLIT, client as u64]);
        let (train_idx, test_idx) = stratified_split(&all, spec.test_fraction, &mut split_rng);
        shards.push(ClientShard {
            client_id: client,
            train: all.subset(&train_idx),
            test: all.subset(&test_idx),
            provenance: format!(
                "synthetic(seed={seed}, alpha={}, client={client}, scale={:.4}, offset={:.4})",
                spec.skew.alpha, shift.scale, shift.offset
            ),
        });
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn positive_fraction(shard: &ClientShard) -> f64 {
        let pos = shard.train.class_counts()[1] + shard.test.class_counts()[1];
        pos as f64 / (shard.train.len() + shard.test.len()) as f64
    }

    #[test]
    fn huge_alpha_gives_uniform_proportions() {
        let spec = SyntheticSpec::new(4, 1000, 4, 2, SkewSpec::label_only(1e6, 3));
        for shard in generate_synthetic(&spec).unwrap() {
            let f = positive_fraction(&shard);
            assert!((f - 0.5).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SyntheticSpec::new(3, 50, 8, 2, SkewSpec::with_random_shifts(0.5, 3, 0.3, 11));
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let mut other = spec.clone();
        other.skew.seed = 12;
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn small_alpha_skew_is_material() {
        let spec = SyntheticSpec::new(6, 400, 8, 2, SkewSpec::label_only(0.1, 0));
        let fr: Vec<f64> = generate_synthetic(&spec).unwrap().iter().map(positive_fraction).collect();
        let spread = fr.iter().cloned().fold(f64::MIN, f64::max) - fr.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.3, "{fr:?}");
    }

    #[test]
    fn every_client_keeps_both_classes_in_train_and_test() {
        let spec = SyntheticSpec::new(6, 300, 8, 2, SkewSpec::label_only(0.05, 4));
        for shard in generate_synthetic(&spec).unwrap() {
            assert!(shard.train.class_counts().iter().all(|&c| c > 0));
            assert!(shard.test.class_counts().iter().all(|&c| c > 0));
            assert_eq!(shard.train.len() + shard.test.len(), 300);
        }
    }

    #[test]
    fn starvation_is_an_error() {
        let spec = SyntheticSpec::new(2, 15, 4, 2, SkewSpec::label_only(1.0, 0));
        assert!(matches!(generate_synthetic(&spec), Err(Error::Data(m)) if m.contains("starvation")));
    }

    #[test]
    fn pixels_are_quantized_unit_interval() {
        let spec = SyntheticSpec::new(2, 40, 6, 3, SkewSpec::with_random_shifts(1.0, 2, 0.5, 2));
        for shard in generate_synthetic(&spec).unwrap() {
            for &v in shard.train.pixels() {
                assert!((0.0..=1.0).contains(&v));
                let q = v * 255.0;
                assert!((q - q.round()).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn classes_differ_on_average() {
        let mut spec = SyntheticSpec::new(1, 400, 8, 2, SkewSpec::label_only(1e6, 5));
        spec.template_amplitude = 0.2;
        let shard = &generate_synthetic(&spec).unwrap()[0];
        let d = &shard.train;
        let mut means = vec![vec![0.0f64; 64]; 2];
        let counts = d.class_counts();
        for i in 0..d.len() {
            for (m, &p) in means[d.labels()[i]].iter_mut().zip(d.image(i)) {
                *m += p as f64 / counts[d.labels()[i]] as f64;
            }
        }
        let gap: f64 = means[0].iter().zip(&means[1]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 64.0;
        assert!(gap > 0.05, "{gap}");
    }
}
