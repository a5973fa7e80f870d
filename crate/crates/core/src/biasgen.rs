//! Synthetic labelled data, long-tail subsampling, label-noise injection,
//! meta-set extraction and mini-batch sampling.
//!
//! Every generator is a pure function of its inputs and a seed. Independent
//! concerns draw from independent ChaCha streams (see [`stream`]).

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::matrix::Matrix;

/// Named stream ids for [`stream`].
pub mod streams {
    pub const TRAIN_DATA: u64 = 1;
    pub const META_DATA: u64 = 2;
    pub const TEST_DATA: u64 = 3;
    pub const LONGTAIL: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const FLIP_TARGETS: u64 = 6;
    pub const META_SPLIT: u64 = 7;
    pub const TRAIN_BATCHES: u64 = 8;
    pub const META_BATCHES: u64 = 9;
    pub const CLASSIFIER_INIT: u64 = 10;
    pub const WEIGHTNET_INIT: u64 = 11;
    pub const TRACKING: u64 = 12;
}

/// Independent reproducible RNG stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Derives a 64-bit seed for a sub-component from a stream.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    stream(seed, id).random()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasedDataset {
    pub features: Matrix,
    pub observed: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub corrupted: Vec<bool>,
    pub class_counts: Vec<usize>,
    pub classes: usize,
}

/// Features and labels for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn count_classes(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

impl BiasedDataset {
    /// Clean dataset: observed labels equal true labels.
    pub fn clean(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let corrupted = vec![false; labels.len()];
        Self::new(features, labels.clone(), labels, corrupted, classes)
    }

    pub fn new(
        features: Matrix,
        observed: Vec<usize>,
        true_labels: Vec<usize>,
        corrupted: Vec<bool>,
        classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        ensure_shape("observed labels", n, observed.len())?;
        ensure_shape("true labels", n, true_labels.len())?;
        ensure_shape("corrupted flags", n, corrupted.len())?;
        if let Some(&y) = observed.iter().chain(&true_labels).find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        for i in 0..n {
            if corrupted[i] != (observed[i] != true_labels[i]) {
                return Err(Error::Data(format!("corrupted flag inconsistent at sample {i}")));
            }
        }
        let class_counts = count_classes(&observed, classes);
        Ok(Self {
            features,
            observed,
            true_labels,
            corrupted,
            class_counts,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn corrupted_count(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let observed: Vec<usize> = indices.iter().map(|&i| self.observed[i]).collect();
        Self {
            features: self.features.select_rows(indices),
            class_counts: count_classes(&observed, self.classes),
            observed,
            true_labels: indices.iter().map(|&i| self.true_labels[i]).collect(),
            corrupted: indices.iter().map(|&i| self.corrupted[i]).collect(),
            classes: self.classes,
        }
    }

    /// Mini-batch with observed labels.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            x: self.features.select_rows(indices),
            y: indices.iter().map(|&i| self.observed[i]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            x: self.features.clone(),
            y: self.observed.clone(),
        }
    }

    fn relabel(&self, observed: Vec<usize>) -> Self {
        let corrupted = observed
            .iter()
            .zip(&self.true_labels)
            .map(|(o, t)| o != t)
            .collect();
        Self {
            features: self.features.clone(),
            class_counts: count_classes(&observed, self.classes),
            observed,
            true_labels: self.true_labels.clone(),
            corrupted,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub classes: usize,
    pub dim: usize,
    /// `classes × dim` class centres.
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation.
    pub scale: f64,
    pub per_class: usize,
}

impl GaussianMixtureSpec {
    /// Two-dimensional classes with centres evenly spaced on a circle.
    pub fn on_circle(classes: usize, radius: f64, scale: f64, per_class: usize) -> Self {
        let means = (0..classes)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / classes as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self {
            classes,
            dim: 2,
            means,
            scale,
            per_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim < 1 || self.per_class < 1 {
            return Err(Error::Config("gaussian dim and per_class must be ≥ 1".into()));
        }
        if self.means.len() != self.classes || self.means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::Config(format!(
                "means must be {} × {}",
                self.classes, self.dim
            )));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("scale must be ≥ 0, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Class-major samples from isotropic Gaussians.
pub fn gen_gaussians(spec: &GaussianMixtureSpec, seed: u64) -> Result<BiasedDataset> {
    gen_gaussians_with(spec, spec.per_class, &mut stream(seed, streams::TRAIN_DATA))
}

/// Same mixture with an explicit per-class count and RNG.
pub fn gen_gaussians_with<R: Rng>(spec: &GaussianMixtureSpec, per_class: usize, rng: &mut R) -> Result<BiasedDataset> {
    spec.validate()?;
    let n = spec.classes * per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in spec.means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + spec.scale * z);
            }
            labels.push(k);
        }
    }
    BiasedDataset::clean(Matrix::from_vec(n, spec.dim, data)?, labels, spec.classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceSpec {
    /// Samples kept for class 0.
    pub base_count: usize,
    /// Largest class size divided by smallest.
    pub factor: f64,
}

impl ImbalanceSpec {
    /// `round(base_count · μ^i)` with `μ = factor^(−1/(c−1))`.
    pub fn class_sizes(&self, classes: usize) -> Result<Vec<usize>> {
        if !(self.factor >= 1.0) || !self.factor.is_finite() {
            return Err(Error::Config(format!("imbalance factor must be ≥ 1, got {}", self.factor)));
        }
        if self.base_count < 1 {
            return Err(Error::Config("imbalance base_count must be ≥ 1".into()));
        }
        if classes < 2 {
            return Ok(vec![self.base_count; classes]);
        }
        let mu = self.factor.powf(-1.0 / (classes - 1) as f64);
        let sizes: Vec<usize> = (0..classes)
            .map(|i| (self.base_count as f64 * mu.powi(i as i32)).round() as usize)
            .collect();
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Data(format!(
                "imbalance factor {} leaves class {k} empty",
                self.factor
            )));
        }
        Ok(sizes)
    }
}

/// Long-tailed subsampling by true class. Kept samples retain their original
/// relative order.
pub fn apply_longtail(ds: &BiasedDataset, spec: &ImbalanceSpec, seed: u64) -> Result<BiasedDataset> {
    let sizes = spec.class_sizes(ds.classes)?;
    let mut rng = stream(seed, streams::LONGTAIL);
    let mut keep = Vec::new();
    for (k, &size) in sizes.iter().enumerate() {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.true_labels[i] == k).collect();
        if members.len() < size {
            return Err(Error::Data(format!(
                "class {k} has {} samples, long-tail needs {size}",
                members.len()
            )));
        }
        keep.extend(index::sample(&mut rng, members.len(), size).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

fn check_rate(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("noise rate must be in [0, 1], got {p}")))
    }
}

/// With probability `p`, resample the observed label uniformly over all
/// classes (the draw may land on the true label).
pub fn apply_uniform_noise(ds: &BiasedDataset, p: f64, seed: u64) -> Result<BiasedDataset> {
    check_rate(p)?;
    let mut rng = stream(seed, streams::NOISE);
    let observed = ds
        .observed
        .iter()
        .map(|&y| {
            let u: f64 = rng.random();
            let replacement = rng.random_range(0..ds.classes);
            if u < p {
                replacement
            } else {
                y
            }
        })
        .collect();
    Ok(ds.relabel(observed))
}

/// Two distinct "similar" classes per source class, never the source itself.
pub fn flip_targets(classes: usize, seed: u64) -> Result<Vec<[usize; 2]>> {
    if classes < 3 {
        return Err(Error::Config(format!(
            "flip noise needs at least 3 classes, got {classes}"
        )));
    }
    let mut rng = stream(seed, streams::FLIP_TARGETS);
    Ok((0..classes)
        .map(|k| {
            let others: Vec<usize> = (0..classes).filter(|&j| j != k).collect();
            let pick = index::sample(&mut rng, others.len(), 2);
            [others[pick.index(0)], others[pick.index(1)]]
        })
        .collect())
}

/// With total probability `p`, flip to one of the class's two targets
/// (`p/2` each).
pub fn apply_flip_noise(ds: &BiasedDataset, p: f64, seed: u64) -> Result<BiasedDataset> {
    check_rate(p)?;
    let targets = flip_targets(ds.classes, seed)?;
    let mut rng = stream(seed, streams::NOISE);
    let observed = ds
        .observed
        .iter()
        .map(|&y| {
            let u: f64 = rng.random();
            if u < p / 2.0 {
                targets[y][0]
            } else if u < p {
                targets[y][1]
            } else {
                y
            }
        })
        .collect();
    Ok(ds.relabel(observed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    Uniform,
    Flip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
}

impl NoiseSpec {
    pub fn apply(&self, ds: &BiasedDataset, seed: u64) -> Result<BiasedDataset> {
        match self.kind {
            NoiseKind::Uniform => apply_uniform_noise(ds, self.rate, seed),
            NoiseKind::Flip => apply_flip_noise(ds, self.rate, seed),
        }
    }
}

/// Carves `per_class` clean samples of every class into a meta set.
/// Returns `(meta, remainder)`; both keep the source order.
pub fn split_meta(ds: &BiasedDataset, per_class: usize, seed: u64) -> Result<(BiasedDataset, BiasedDataset)> {
    let mut rng = stream(seed, streams::META_SPLIT);
    let mut chosen = vec![false; ds.len()];
    for k in 0..ds.classes {
        let clean: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.observed[i] == k && !ds.corrupted[i])
            .collect();
        if clean.len() < per_class {
            return Err(Error::Data(format!(
                "class {k} has {} clean samples, meta set needs {per_class}",
                clean.len()
            )));
        }
        for j in index::sample(&mut rng, clean.len(), per_class) {
            chosen[clean[j]] = true;
        }
    }
    let meta: Vec<usize> = (0..ds.len()).filter(|&i| chosen[i]).collect();
    let rest: Vec<usize> = (0..ds.len()).filter(|&i| !chosen[i]).collect();
    Ok((ds.subset(&meta), ds.subset(&rest)))
}

/// `size` distinct indices from `0..len`, sorted ascending.
pub fn sample_batch<R: Rng>(len: usize, size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if size > len {
        return Err(Error::Data(format!("batch of {size} from {len} samples")));
    }
    let mut idx = index::sample(rng, len, size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Writes the dataset as CSV: a first record `N,d,c`, then one record per
/// sample `features..., observed, true, corrupted` with `corrupted` as 0/1.
/// Floats use the shortest representation that round-trips exactly.
pub fn write_csv<W: Write>(ds: &BiasedDataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record([ds.len().to_string(), ds.dim().to_string(), ds.classes.to_string()])?;
    let mut rec = Vec::with_capacity(ds.dim() + 3);
    for i in 0..ds.len() {
        rec.clear();
        rec.extend(ds.features.row(i).iter().map(|v| crate::fmt_float(*v)));
        rec.push(ds.observed[i].to_string());
        rec.push(ds.true_labels[i].to_string());
        rec.push(u8::from(ds.corrupted[i]).to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<dataset writer>", e))?;
    Ok(())
}

pub fn save_csv(ds: &BiasedDataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, std::io::BufWriter::new(f))
}

pub fn load_csv(path: &Path) -> Result<BiasedDataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(std::io::BufReader::new(f));
    let mut records = r.records();
    let bad = |msg: String| Error::format(path, msg);
    let head = records.next().ok_or_else(|| bad("empty file".into()))??;
    let parse_usize = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("expected integer, got {s:?}")));
    if head.len() != 3 {
        return Err(bad("first record must be N,d,c".into()));
    }
    let (n, d, c) = (parse_usize(&head[0])?, parse_usize(&head[1])?, parse_usize(&head[2])?);
    let mut data = Vec::with_capacity(n * d);
    let (mut obs, mut tru, mut cor) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for rec in records {
        let rec = rec?;
        if rec.len() != d + 3 {
            return Err(bad(format!("record has {} fields, expected {}", rec.len(), d + 3)));
        }
        for f in rec.iter().take(d) {
            data.push(f.trim().parse::<f64>().map_err(|_| bad(format!("bad float {f:?}")))?);
        }
        obs.push(parse_usize(&rec[d])?);
        tru.push(parse_usize(&rec[d + 1])?);
        cor.push(match rec[d + 2].trim() {
            "0" => false,
            "1" => true,
            s => return Err(bad(format!("corrupted flag must be 0 or 1, got {s:?}"))),
        });
    }
    if obs.len() != n {
        return Err(bad(format!("header says {n} samples, found {}", obs.len())));
    }
    BiasedDataset::new(Matrix::from_vec(n, d, data)?, obs, tru, cor, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec3(per_class: usize) -> GaussianMixtureSpec {
        GaussianMixtureSpec::on_circle(3, 2.0, 1.0, per_class)
    }

    fn spec_c(c: usize, per_class: usize) -> GaussianMixtureSpec {
        GaussianMixtureSpec {
            classes: c,
            dim: 1,
            means: (0..c).map(|k| vec![k as f64]).collect(),
            scale: 0.5,
            per_class,
        }
    }

    #[test]
    fn gaussian_counts_and_determinism() {
        let ds = gen_gaussians(&spec3(100), 1).unwrap();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.class_counts, vec![100, 100, 100]);
        assert_eq!(ds.corrupted_count(), 0);
        assert_eq!(ds.observed, ds.true_labels);
        let again = gen_gaussians(&spec3(100), 1).unwrap();
        assert_eq!(ds, again);
        let other = gen_gaussians(&spec3(100), 2).unwrap();
        assert_ne!(ds.features, other.features);
        assert_eq!(ds.class_counts, other.class_counts);
    }

    #[test]
    fn zero_scale_gives_means() {
        let mut s = spec3(5);
        s.scale = 0.0;
        let ds = gen_gaussians(&s, 3).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.features.row(i), &s.means[ds.true_labels[i]][..]);
        }
    }

    #[test]
    fn invalid_gaussian_spec() {
        let mut s = spec3(5);
        s.classes = 1;
        assert!(gen_gaussians(&s, 0).is_err());
        let mut s = spec3(5);
        s.means.pop();
        assert!(gen_gaussians(&s, 0).is_err());
    }

    #[test]
    fn longtail_counts() {
        let s = ImbalanceSpec { base_count: 5000, factor: 100.0 };
        let sizes = s.class_sizes(10).unwrap();
        assert_eq!(sizes[0], 5000);
        assert_eq!(sizes[9], 50);
        let s = ImbalanceSpec { base_count: 100, factor: 4.0 };
        assert_eq!(s.class_sizes(2).unwrap(), vec![100, 25]);
        let s = ImbalanceSpec { base_count: 10, factor: 100.0 };
        assert!(matches!(s.class_sizes(3), Err(Error::Data(_))));
        assert!(ImbalanceSpec { base_count: 10, factor: 0.5 }.class_sizes(3).is_err());
    }

    #[test]
    fn longtail_factor_one_is_identity() {
        let ds = gen_gaussians(&spec3(40), 4).unwrap();
        let out = apply_longtail(&ds, &ImbalanceSpec { base_count: 40, factor: 1.0 }, 9).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn longtail_subsets_without_fabrication() {
        let ds = gen_gaussians(&spec3(200), 4).unwrap();
        let out = apply_longtail(&ds, &ImbalanceSpec { base_count: 200, factor: 20.0 }, 9).unwrap();
        assert_eq!(out.class_counts, vec![200, 45, 10]);
        for i in 0..out.len() {
            let found = (0..ds.len()).any(|j| {
                ds.features.row(j) == out.features.row(i) && ds.true_labels[j] == out.true_labels[i]
            });
            assert!(found);
        }
        assert!(apply_longtail(&ds, &ImbalanceSpec { base_count: 500, factor: 2.0 }, 0).is_err());
    }

    /// |x − N·q| ≤ 3·sqrt(N·q·(1−q))
    fn within_3_sigma(count: usize, n: usize, q: f64) -> bool {
        let mean = n as f64 * q;
        let sd = (n as f64 * q * (1.0 - q)).sqrt();
        (count as f64 - mean).abs() <= 3.0 * sd
    }

    #[test]
    fn uniform_noise_rates() {
        let ds = gen_gaussians(&spec_c(10, 1000), 0).unwrap();
        assert_eq!(apply_uniform_noise(&ds, 0.0, 5).unwrap(), ds);
        let full = apply_uniform_noise(&ds, 1.0, 5).unwrap();
        assert!(within_3_sigma(full.corrupted_count(), 10_000, 0.9));
        let a = apply_uniform_noise(&ds, 0.4, 6).unwrap();
        let b = apply_uniform_noise(&ds, 0.4, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.true_labels, ds.true_labels);
        assert!(apply_uniform_noise(&ds, 1.5, 0).is_err());
    }

    #[test]
    fn flip_noise_rates() {
        let ds = gen_gaussians(&spec_c(3, 10_000), 0).unwrap();
        assert_eq!(apply_flip_noise(&ds, 0.0, 1).unwrap(), ds);
        let out = apply_flip_noise(&ds, 0.4, 1).unwrap();
        assert!(within_3_sigma(out.corrupted_count(), 30_000, 0.4));
        let targets = flip_targets(3, 1).unwrap();
        assert_eq!(targets, flip_targets(3, 1).unwrap());
        for i in 0..out.len() {
            if out.corrupted[i] {
                assert!(targets[out.true_labels[i]].contains(&out.observed[i]));
            }
        }
        let two = gen_gaussians(&spec_c(2, 10), 0).unwrap();
        assert!(matches!(apply_flip_noise(&two, 0.2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn flip_targets_distinct() {
        for seed in 0..20 {
            for (k, t) in flip_targets(6, seed).unwrap().iter().enumerate() {
                assert_ne!(t[0], t[1]);
                assert!(t[0] != k && t[1] != k);
            }
        }
    }

    #[test]
    fn meta_split() {
        let ds = gen_gaussians(&spec_c(10, 50), 2).unwrap();
        let noisy = apply_uniform_noise(&ds, 0.5, 2).unwrap();
        let (meta, rest) = split_meta(&noisy, 10, 3).unwrap();
        assert_eq!(meta.len(), 100);
        assert_eq!(meta.class_counts, vec![10; 10]);
        assert_eq!(meta.corrupted_count(), 0);
        assert_eq!(rest.len(), noisy.len() - 100);
        let (empty, all) = split_meta(&noisy, 0, 3).unwrap();
        assert!(empty.is_empty());
        assert_eq!(all, noisy);
        assert!(split_meta(&noisy, 49, 3).is_err());
    }

    #[test]
    fn batch_sampling() {
        let mut rng = stream(1, streams::TRAIN_BATCHES);
        let all = sample_batch(20, 20, &mut rng).unwrap();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        let a = sample_batch(100, 10, &mut stream(4, 0)).unwrap();
        let b = sample_batch(100, 10, &mut stream(4, 0)).unwrap();
        assert_eq!(a, b);
        assert!(sample_batch(5, 6, &mut rng).is_err());
    }

    #[test]
    fn batch_inclusion_uniform() {
        let (len, size, draws) = (20, 5, 100_000);
        let mut rng = stream(7, streams::TRAIN_BATCHES);
        let mut hits = vec![0usize; len];
        for _ in 0..draws {
            for i in sample_batch(len, size, &mut rng).unwrap() {
                hits[i] += 1;
            }
        }
        let q = size as f64 / len as f64;
        for h in hits {
            assert!(within_3_sigma(h, draws, q) || {
                // 20 simultaneous tests; allow a 4σ margin for the family
                let sd = (draws as f64 * q * (1.0 - q)).sqrt();
                (h as f64 - draws as f64 * q).abs() <= 4.0 * sd
            });
        }
    }

    #[test]
    fn csv_roundtrip_bit_exact() {
        let ds = gen_gaussians(&spec3(30), 8).unwrap();
        let ds = apply_flip_noise(&ds, 0.3, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back, ds);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("90,2,3\n"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn csv_rejects_inconsistent_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1,1,2\n0.5,0,1,0\n").unwrap();
        assert!(load_csv(&path).is_err());
    }

    proptest! {
        #[test]
        fn corrupted_flags_consistent(seed in 0u64..1000, p in 0.0f64..=1.0, flip in any::<bool>()) {
            let ds = gen_gaussians(&spec_c(4, 30), seed).unwrap();
            let out = if flip { apply_flip_noise(&ds, p, seed) } else { apply_uniform_noise(&ds, p, seed) }.unwrap();
            for i in 0..out.len() {
                prop_assert_eq!(out.corrupted[i], out.observed[i] != out.true_labels[i]);
            }
            prop_assert_eq!(&out.true_labels, &ds.true_labels);
            prop_assert_eq!(out.class_counts.iter().sum::<usize>(), out.len());
        }

        #[test]
        fn meta_and_remainder_disjoint(seed in 0u64..500, per_class in 0usize..8) {
            let ds = apply_uniform_noise(&gen_gaussians(&spec_c(3, 20), seed).unwrap(), 0.3, seed).unwrap();
            if let Ok((meta, rest)) = split_meta(&ds, per_class, seed) {
                prop_assert!(meta.class_counts.iter().all(|&c| c == per_class));
                prop_assert_eq!(meta.len() + rest.len(), ds.len());
                for i in 0..meta.len() {
                    for j in 0..rest.len() {
                        prop_assert!(meta.features.row(i) != rest.features.row(j));
                    }
                }
            }
        }
    }
}
