//! Experiment orchestration: metrics, weighting analyses, fixed-weight
//! baselines, multi-seed runs and on-disk reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::biasgen::{
    apply_longtail, derive_seed, gen_gaussians_with, load_csv, split_meta, stream, streams, BiasedDataset,
};
use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metaopt::{self, TrainOptions, TrainState, Weighting};
use crate::nnet::{chain, Activation, DenseNet};
use crate::weightnet::{probe_curve, MWNet};

/// Test accuracy and `confusion[true][predicted]`.
pub fn evaluate(classifier: &DenseNet, test: &BiasedDataset) -> Result<(f64, Vec<Vec<usize>>)> {
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let out = classifier.predict(&test.features)?;
    let mut confusion = vec![vec![0usize; test.classes]; test.classes];
    let mut correct = 0;
    for (i, row) in out.iter_rows().enumerate() {
        let pred = argmax(row);
        if pred >= test.classes {
            return Err(Error::Data(format!("classifier predicts class {pred} of {}", test.classes)));
        }
        let truth = test.true_labels[i];
        confusion[truth][pred] += 1;
        if truth == pred {
            correct += 1;
        }
    }
    Ok((correct as f64 / test.len() as f64, confusion))
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub sample_id: usize,
    pub weight: f64,
    pub corrupted: bool,
}

pub(crate) fn weight_records(weights: &[f64], train: &BiasedDataset) -> Vec<WeightRecord> {
    weights
        .iter()
        .enumerate()
        .map(|(i, &weight)| WeightRecord {
            sample_id: i,
            weight,
            corrupted: train.corrupted[i],
        })
        .collect()
}

/// Raw weight of every training sample at its current loss.
pub fn weight_distribution(state: &TrainState, train: &BiasedDataset) -> Result<Vec<WeightRecord>> {
    let losses = metaopt::batch_losses(&state.w, &train.all())?;
    Ok(weight_records(&state.theta.weights(&losses)?, train))
}

/// Mean weight of clean and of corrupted samples; `None` for an empty group.
pub fn weight_separation(dist: &[WeightRecord]) -> (Option<f64>, Option<f64>) {
    let mean = |noisy: bool| {
        let v: Vec<f64> = dist.iter().filter(|r| r.corrupted == noisy).map(|r| r.weight).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(false), mean(true))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub epoch: usize,
    pub mean_abs_delta: f64,
    pub std_abs_delta: f64,
}

/// Mean and population std of `|w_e − w_{e−1}|` over tracked samples, for
/// each pair of adjacent snapshots.
pub fn stability_trace(snapshots: &[Vec<f64>]) -> Result<Vec<StabilityRow>> {
    if snapshots.len() < 2 {
        return Err(Error::Data(format!(
            "stability trace needs ≥ 2 snapshots, got {}",
            snapshots.len()
        )));
    }
    Ok(snapshots
        .windows(2)
        .enumerate()
        .map(|(e, pair)| {
            let d: Vec<f64> = pair[1].iter().zip(&pair[0]).map(|(a, b)| (a - b).abs()).collect();
            let (mean, std) = mean_std(&d);
            StabilityRow {
                epoch: e + 1,
                mean_abs_delta: mean,
                std_abs_delta: std,
            }
        })
        .collect())
}

/// Mean of `mean_abs_delta` over the first and the last decile of epochs.
pub fn stability_deciles(trace: &[StabilityRow]) -> (f64, f64) {
    let k = (trace.len() / 10).max(1);
    let avg = |rows: &[StabilityRow]| rows.iter().map(|r| r.mean_abs_delta).sum::<f64>() / rows.len() as f64;
    (avg(&trace[..k]), avg(&trace[trace.len() - k..]))
}

/// Trailing moving average with the given window (shorter at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Population mean and standard deviation; zeros for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Linear-interpolated quantile, `q ∈ [0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Stylized fixed weighting functions used as baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BaselineSpec {
    /// Every sample weighs 1.
    Uniform,
    /// `(ℓ / ℓ_max)^γ` with `ℓ_max` the batch maximum; emphasises hard samples.
    Ramp { gamma: f64 },
    /// `1` below the threshold, `0` at or above; drops hard samples.
    Step { lambda: f64 },
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineSpec::Ramp { gamma } if !(gamma >= 0.0) => {
                Err(Error::Config(format!("ramp exponent must be ≥ 0, got {gamma}")))
            }
            BaselineSpec::Step { lambda } if !(lambda > 0.0) => {
                Err(Error::Config(format!("step threshold must be > 0, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineSpec::Uniform => "uniform",
            BaselineSpec::Ramp { .. } => "ramp",
            BaselineSpec::Step { .. } => "step",
        }
    }

    pub fn weights(&self, losses: &[f64]) -> Vec<f64> {
        match *self {
            BaselineSpec::Uniform => vec![1.0; losses.len()],
            BaselineSpec::Ramp { gamma } => {
                let max = losses.iter().copied().fold(0.0, f64::max);
                losses
                    .iter()
                    .map(|&l| {
                        let r = if max > 0.0 { l / max } else { 1.0 };
                        r.max(0.0).powf(gamma).clamp(0.0, 1.0)
                    })
                    .collect()
            }
            BaselineSpec::Step { lambda } => losses.iter().map(|&l| if l < lambda { 1.0 } else { 0.0 }).collect(),
        }
    }
}

pub(crate) fn probe_weighting(weighting: &Weighting, theta: &MWNet, lo: f64, hi: f64, steps: usize) -> Result<Vec<(f64, f64)>> {
    let hi = if hi > lo { hi } else { lo + 1.0 };
    match weighting {
        Weighting::Learned => probe_curve(theta, lo, hi, steps),
        Weighting::Fixed(b) => {
            let grid: Vec<f64> = probe_curve(theta, lo, hi, steps)?.into_iter().map(|(l, _)| l).collect();
            Ok(grid.iter().copied().zip(b.weights(&grid)).collect())
        }
    }
}

/// Training with the weight net replaced by a fixed function; β is unused.
pub fn run_baseline(
    train: &BiasedDataset,
    meta: &BiasedDataset,
    test: &BiasedDataset,
    init: TrainState,
    cfg: &metaopt::TrainConfig,
    baseline: BaselineSpec,
) -> Result<RunReport> {
    baseline.validate()?;
    let opts = TrainOptions {
        weighting: Weighting::Fixed(baseline),
        ..TrainOptions::default()
    };
    Ok(metaopt::train(train, meta, test, init, cfg, &opts)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monotonicity {
    /// Spearman rank correlation between loss and weight.
    pub score: f64,
    /// The weights were constant, so the score is reported as 0.
    pub degenerate: bool,
}

/// Average ranks (1-based), ties share their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, _) = mean_std(a);
    let (mb, _) = mean_std(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn monotonicity_score(curve: &[(f64, f64)]) -> Result<Monotonicity> {
    if curve.len() < 10 {
        return Err(Error::Data(format!("monotonicity needs ≥ 10 points, got {}", curve.len())));
    }
    let losses: Vec<f64> = curve.iter().map(|p| p.0).collect();
    let weights: Vec<f64> = curve.iter().map(|p| p.1).collect();
    Ok(match pearson(&ranks(&losses), &ranks(&weights)) {
        Some(score) => Monotonicity { score, degenerate: false },
        None => Monotonicity { score: 0.0, degenerate: true },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean unweighted training loss over the epoch's batches.
    pub train_loss: f64,
    pub meta_loss: f64,
    pub test_accuracy: f64,
    /// Mean ‖∇_Θ meta loss‖ over the epoch's iterations (0 for baselines).
    pub meta_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub epochs: Vec<EpochMetrics>,
    pub confusion: Vec<Vec<usize>>,
    pub weight_curve: Vec<(f64, f64)>,
    pub weight_dist: Vec<WeightRecord>,
    pub stability: Vec<StabilityRow>,
    pub config_echo: serde_json::Value,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn accuracy_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.test_accuracy).collect()
    }

    pub fn grad_norm_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.meta_grad_norm).collect()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_accuracy)
    }

    pub fn monotonicity(&self) -> Result<Monotonicity> {
        monotonicity_score(&self.weight_curve)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        table::write(
            &dir.join("metrics.csv"),
            &["epoch", "train_loss", "meta_loss", "test_accuracy", "meta_grad_norm"],
            self.epochs.iter().map(|e| {
                vec![
                    e.epoch.to_string(),
                    crate::fmt_float(e.train_loss),
                    crate::fmt_float(e.meta_loss),
                    crate::fmt_float(e.test_accuracy),
                    crate::fmt_float(e.meta_grad_norm),
                ]
            }),
        )?;
        table::write(
            &dir.join("weight_curve.csv"),
            &["loss", "weight"],
            self.weight_curve.iter().map(|(l, w)| vec![crate::fmt_float(*l), crate::fmt_float(*w)]),
        )?;
        table::write(
            &dir.join("weight_dist.csv"),
            &["sample_id", "weight", "corrupted"],
            self.weight_dist.iter().map(|r| {
                vec![
                    r.sample_id.to_string(),
                    crate::fmt_float(r.weight),
                    u8::from(r.corrupted).to_string(),
                ]
            }),
        )?;
        table::write(
            &dir.join("stability.csv"),
            &["epoch", "mean_abs_delta", "std_abs_delta"],
            self.stability.iter().map(|r| {
                vec![
                    r.epoch.to_string(),
                    crate::fmt_float(r.mean_abs_delta),
                    crate::fmt_float(r.std_abs_delta),
                ]
            }),
        )?;
        let c = self.confusion.len();
        let mut header = vec!["true".to_string()];
        header.extend((0..c).map(|k| format!("pred_{k}")));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        table::write(
            &dir.join("confusion.csv"),
            &header_refs,
            self.confusion.iter().enumerate().map(|(t, row)| {
                std::iter::once(t.to_string())
                    .chain(row.iter().map(usize::to_string))
                    .collect()
            }),
        )?;
        let json = serde_json::to_string_pretty(&self.config_echo)? + "\n";
        write_file(&dir.join("config.json"), json.as_bytes())?;
        let warn_path = dir.join("warnings.txt");
        if self.warnings.is_empty() {
            if warn_path.exists() {
                std::fs::remove_file(&warn_path).map_err(|e| Error::io(&warn_path, e))?;
            }
        } else {
            write_file(&warn_path, (self.warnings.join("\n") + "\n").as_bytes())?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let metrics_path = dir.join("metrics.csv");
        let metrics = table::read(&metrics_path, &["epoch", "train_loss", "meta_loss", "test_accuracy", "meta_grad_norm"])?;
        let epochs = metrics
            .iter()
            .map(|r| {
                Ok(EpochMetrics {
                    epoch: r.int(0)?,
                    train_loss: r.float(1)?,
                    meta_loss: r.float(2)?,
                    test_accuracy: r.float(3)?,
                    meta_grad_norm: r.float(4)?,
                })
            })
            .collect::<Result<_>>()?;
        let weight_curve = table::read(&dir.join("weight_curve.csv"), &["loss", "weight"])?
            .iter()
            .map(|r| Ok((r.float(0)?, r.float(1)?)))
            .collect::<Result<_>>()?;
        let weight_dist = table::read(&dir.join("weight_dist.csv"), &["sample_id", "weight", "corrupted"])?
            .iter()
            .map(|r| {
                Ok(WeightRecord {
                    sample_id: r.int(0)?,
                    weight: r.float(1)?,
                    corrupted: r.int(2)? == 1,
                })
            })
            .collect::<Result<_>>()?;
        let stability = table::read(&dir.join("stability.csv"), &["epoch", "mean_abs_delta", "std_abs_delta"])?
            .iter()
            .map(|r| {
                Ok(StabilityRow {
                    epoch: r.int(0)?,
                    mean_abs_delta: r.float(1)?,
                    std_abs_delta: r.float(2)?,
                })
            })
            .collect::<Result<_>>()?;
        let confusion = table::read_any(&dir.join("confusion.csv"))?
            .iter()
            .map(|r| (1..r.len()).map(|k| r.int(k)).collect::<Result<Vec<usize>>>())
            .collect::<Result<_>>()?;
        let config_path = dir.join("config.json");
        let config_echo = serde_json::from_str(&read_file(&config_path)?)?;
        let warn_path = dir.join("warnings.txt");
        let warnings = if warn_path.exists() {
            read_file(&warn_path)?.lines().map(str::to_string).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            epochs,
            confusion,
            weight_curve,
            weight_dist,
            stability,
            config_echo,
            warnings,
        })
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Headered CSV tables with LF line endings.
pub mod table {
    use super::*;

    pub struct Row<'a> {
        path: &'a Path,
        fields: csv::StringRecord,
    }

    impl Row<'_> {
        pub fn len(&self) -> usize {
            self.fields.len()
        }

        pub fn is_empty(&self) -> bool {
            self.fields.is_empty()
        }

        pub fn float(&self, k: usize) -> Result<f64> {
            let s = self.fields.get(k).unwrap_or("");
            s.parse().map_err(|_| Error::format(self.path, format!("bad float {s:?}")))
        }

        pub fn int(&self, k: usize) -> Result<usize> {
            let s = self.fields.get(k).unwrap_or("");
            s.parse().map_err(|_| Error::format(self.path, format!("bad integer {s:?}")))
        }
    }

    pub fn write<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(std::io::BufWriter::new(f));
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads rows after checking the header matches `expected` exactly.
    pub fn read<'a>(path: &'a Path, expected: &[&str]) -> Result<Vec<Row<'a>>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::format(path, format!("cannot open: {e}")),
            _ => Error::Csv(e),
        })?;
        let header = r.headers()?.clone();
        if header.iter().ne(expected.iter().copied()) {
            return Err(Error::format(path, format!("header {header:?}, expected {expected:?}")));
        }
        r.records()
            .map(|rec| Ok(Row { path, fields: rec? }))
            .collect()
    }

    pub fn read_any(path: &Path) -> Result<Vec<Row<'_>>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, format!("cannot open: {e}")))?;
        r.records()
            .map(|rec| Ok(Row { path, fields: rec? }))
            .collect()
    }
}

/// Train/meta/test sets for one seed.
pub fn build_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(BiasedDataset, BiasedDataset, BiasedDataset)> {
    match &cfg.dataset {
        DatasetSource::Gaussian(g) => {
            let spec = g.mixture();
            let mut train = gen_gaussians_with(&spec, spec.per_class, &mut stream(seed, streams::TRAIN_DATA))?;
            train = apply_bias(cfg, train, seed)?;
            let pool = gen_gaussians_with(&spec, cfg.meta.per_class, &mut stream(seed, streams::META_DATA));
            let meta = match pool {
                Ok(pool) => split_meta(&pool, cfg.meta.per_class, seed)?.0,
                Err(_) if cfg.meta.per_class == 0 => train.subset(&[]),
                Err(e) => return Err(e),
            };
            let test = gen_gaussians_with(&spec, g.test_per_class, &mut stream(seed, streams::TEST_DATA))?;
            Ok((train, meta, test))
        }
        DatasetSource::File { train, test } => {
            let full = apply_bias(cfg, load_csv(train)?, seed)?;
            let (meta, rest) = split_meta(&full, cfg.meta.per_class, seed)?;
            Ok((rest, meta, load_csv(test)?))
        }
    }
}

pub fn apply_bias(cfg: &ExperimentConfig, mut ds: BiasedDataset, seed: u64) -> Result<BiasedDataset> {
    if let Some(imb) = &cfg.bias.imbalance {
        ds = apply_longtail(&ds, imb, seed)?;
    }
    if let Some(noise) = &cfg.bias.noise {
        ds = noise.apply(&ds, seed)?;
    }
    Ok(ds)
}

/// Initial classifier and weight net for one seed.
pub fn initial_state(cfg: &ExperimentConfig, dim: usize, classes: usize, seed: u64) -> Result<TrainState> {
    let mut widths = vec![dim];
    widths.extend_from_slice(&cfg.model.classifier_hidden);
    widths.push(classes);
    let w = DenseNet::init(&chain(&widths, Activation::ReLU, Activation::Identity), derive_seed(seed, streams::CLASSIFIER_INIT))?;
    let theta = MWNet::new(&cfg.model.weight_net_hidden()?, derive_seed(seed, streams::WEIGHTNET_INIT))?;
    Ok(TrainState::new(w, theta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub runs: Vec<SeedRun>,
    pub baselines: Vec<(BaselineSpec, Vec<SeedRun>)>,
    /// Final weight nets per seed, in `runs` order.
    pub weight_nets: Vec<MWNet>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracySummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(runs: &[SeedRun]) -> AccuracySummary {
    let acc: Vec<f64> = runs.iter().map(|r| r.report.final_accuracy()).collect();
    let (mean, std) = mean_std(&acc);
    AccuracySummary {
        mean,
        std,
        count: acc.len(),
    }
}

impl ExperimentReport {
    pub fn summary(&self) -> AccuracySummary {
        summarize(&self.runs)
    }

    /// Layout: `seed_<s>/` per learned run, `baseline_<kind>/seed_<s>/` per
    /// baseline run, plus `summary.csv` and per-run `weight_net.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rows = Vec::new();
        for (run, theta) in self.runs.iter().zip(&self.weight_nets) {
            let d = run_dir(dir, None, run.seed);
            run.report.write_dir(&d)?;
            write_file(&d.join("weight_net.json"), (serde_json::to_string_pretty(theta)? + "\n").as_bytes())?;
            rows.push(vec!["mwnet".into(), run.seed.to_string(), crate::fmt_float(run.report.final_accuracy())]);
        }
        for (spec, runs) in &self.baselines {
            for run in runs {
                run.report.write_dir(&run_dir(dir, Some(spec.name()), run.seed))?;
                rows.push(vec![spec.name().into(), run.seed.to_string(), crate::fmt_float(run.report.final_accuracy())]);
            }
        }
        let mut agg = vec![("mwnet".to_string(), self.summary())];
        agg.extend(self.baselines.iter().map(|(s, r)| (s.name().to_string(), summarize(r))));
        table::write(&dir.join("summary.csv"), &["method", "seed", "final_accuracy"], rows)?;
        table::write(
            &dir.join("aggregate.csv"),
            &["method", "runs", "mean_accuracy", "std_accuracy"],
            agg.into_iter().map(|(m, s)| vec![m, s.count.to_string(), crate::fmt_float(s.mean), crate::fmt_float(s.std)]),
        )
    }
}

pub fn run_dir(root: &Path, baseline: Option<&str>, seed: u64) -> PathBuf {
    match baseline {
        Some(b) => root.join(format!("baseline_{b}")).join(format!("seed_{seed}")),
        None => root.join(format!("seed_{seed}")),
    }
}

/// Generates data, trains the learned weighting and every configured
/// baseline for each seed. Seeds run in parallel; each owns its state.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let results = Exec::default().map(cfg.seeds.len(), |k| run_seed(cfg, cfg.seeds[k]));
    let mut runs = Vec::new();
    let mut weight_nets = Vec::new();
    let mut baselines: Vec<(BaselineSpec, Vec<SeedRun>)> = cfg.baselines.iter().map(|b| (*b, Vec::new())).collect();
    for r in results {
        let (run, theta, base) = r?;
        runs.push(run);
        weight_nets.push(theta);
        for (slot, b) in baselines.iter_mut().zip(base) {
            slot.1.push(b);
        }
    }
    Ok(ExperimentReport {
        runs,
        baselines,
        weight_nets,
    })
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(SeedRun, MWNet, Vec<SeedRun>)> {
    let (train, meta, test) = build_datasets(cfg, seed)?;
    let init = initial_state(cfg, train.dim(), train.classes, seed)?;
    let tcfg = metaopt::TrainConfig {
        seed,
        ..cfg.optim.clone()
    };
    let echo = cfg.echo(seed)?;
    let opts = TrainOptions {
        tracked: cfg.tracked,
        probe_steps: cfg.probe_steps,
        weighting: Weighting::Learned,
        exec: Exec::default(),
        config_echo: echo.clone(),
    };
    let (state, report) = metaopt::train(&train, &meta, &test, init.clone(), &tcfg, &opts)?;
    let mut base = Vec::new();
    for b in &cfg.baselines {
        b.validate()?;
        let opts = TrainOptions {
            weighting: Weighting::Fixed(*b),
            ..opts.clone()
        };
        let (_, r) = metaopt::train(&train, &meta, &test, init.clone(), &tcfg, &opts)?;
        base.push(SeedRun { seed, report: r });
    }
    Ok((SeedRun { seed, report }, state.theta, base))
}

/// Minimal deterministic SVG line plot.
pub fn line_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let finite: Vec<&(f64, f64)> = points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &&(x, y) in &finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if finite.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let path: Vec<String> = finite.iter().map(|&&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
            "<line x1=\"{pad}\" y1=\"{by}\" x2=\"{rx}\" y2=\"{by}\" stroke=\"black\"/>\n",
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{by}\" stroke=\"black\"/>\n",
            "<text x=\"{cx}\" y=\"{lx}\" text-anchor=\"middle\" font-size=\"12\">{xl} [{x0:.3}, {x1:.3}]</text>\n",
            "<text x=\"12\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">{yl} [{y0:.3}, {y1:.3}]</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pad = pad,
        cx = w / 2.0,
        cy = h / 2.0,
        by = h - pad,
        rx = w - pad,
        lx = h - 12.0,
        title = title,
        xl = x_label,
        yl = y_label,
        x0 = x0,
        x1 = x1,
        y0 = y0,
        y1 = y1,
        pts = path.join(" "),
    )
}
