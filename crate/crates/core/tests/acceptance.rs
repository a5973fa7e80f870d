//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. A positional argument filters criteria by
//! substring of their name.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mwnet::biasgen::{
    apply_flip_noise, apply_longtail, apply_uniform_noise, gen_gaussians, save_csv, BiasedDataset, GaussianMixtureSpec,
    ImbalanceSpec,
};
use mwnet::gradcheck::{self, GradcheckSetup};
use mwnet::harness::{
    mean_std, moving_average, run_experiment, stability_deciles, summarize, weight_separation, ExperimentReport,
};
use mwnet::loss::{CrossEntropy, SampleLoss};
use mwnet::matrix::relative_error;
use mwnet::nnet::{chain, fd_gradient, Activation, DenseNet};
use mwnet::weightnet::{normalize, probe_curve};
use mwnet::{Exec, ExperimentConfig, Matrix};

const GRADCHECK_INSTANCES: u64 = 20;
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(30);
const CLASSIFIER_GRAD_TOL: f64 = 1e-4;
const CLASSIFIER_GRAD_BUDGET: Duration = Duration::from_secs(60);
const CLASSIFIER_GRAD_CASES: u64 = 300;
const MAX_CLASSIFIER_PARAMS: usize = 200;
const SPEARMAN_THRESHOLD: f64 = 0.8;
const SEEDS_REQUIRED: usize = 4;
const CLEAN_PARITY: f64 = 0.02;
const IMBALANCE_BUDGET: Duration = Duration::from_secs(600);
const MA_WINDOW: usize = 10;
const NOISE_SAMPLES: usize = 10_000;
const NORMALIZE_VECTORS: usize = 10_000;
const NORMALIZE_SUM_TOL: f64 = 1e-12;

const IMBALANCE_CONFIG: &str = include_str!("../../../configs/imbalance.json");
const NOISE_CONFIG: &str = include_str!("../../../configs/noise.json");
const CLEAN_CONFIG: &str = include_str!("../../../configs/clean.json");
const TOY_CONFIG: &str = include_str!("../../../configs/toy.json");

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Experiments shared between criteria, each run at most once.
#[derive(Default)]
struct Runs {
    imbalance: Option<(ExperimentReport, Duration)>,
    noise: Option<ExperimentReport>,
    clean: Option<ExperimentReport>,
}

fn experiment(text: &str) -> ExperimentReport {
    let cfg = ExperimentConfig::from_json(text).expect("pinned config parses");
    run_experiment(&cfg).expect("experiment runs")
}

impl Runs {
    fn imbalance(&mut self) -> &(ExperimentReport, Duration) {
        self.imbalance.get_or_insert_with(|| {
            let t = Instant::now();
            let r = experiment(IMBALANCE_CONFIG);
            (r, t.elapsed())
        })
    }

    fn noise(&mut self) -> &ExperimentReport {
        self.noise.get_or_insert_with(|| experiment(NOISE_CONFIG))
    }

    fn clean(&mut self) -> &ExperimentReport {
        self.clean.get_or_insert_with(|| experiment(CLEAN_CONFIG))
    }
}

fn fmt_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn c1_meta_gradient(_: &mut Runs) -> Outcome {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..GRADCHECK_INSTANCES).collect();
    let setup = GradcheckSetup {
        tolerance: GRADCHECK_TOL,
        ..GradcheckSetup::default()
    };
    let out = gradcheck::run(&setup, &seeds, false).expect("gradcheck runs");
    let elapsed = t.elapsed();
    let passed = out.passed() && elapsed < GRADCHECK_BUDGET && setup.classifier == [2, 8, 3];
    outcome(
        passed,
        format!(
            "{} checks, max rel err {:.2e} (tol {GRADCHECK_TOL:.0e}), {:.2?}",
            out.instances.len(),
            out.max_rel_error(),
            elapsed
        ),
    )
}

/// Per-sample and weighted-batch cross-entropy gradients against central
/// differences on random small nets.
fn c2_classifier_gradients(_: &mut Runs) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let acts = [Activation::ReLU, Activation::Sigmoid, Activation::Identity];
    let mut worst = 0.0f64;
    let mut checked = 0;
    for case in 0..CLASSIFIER_GRAD_CASES {
        let depth = rng.random_range(0..3);
        let mut widths = vec![rng.random_range(1..5)];
        for _ in 0..depth {
            widths.push(rng.random_range(1..9));
        }
        widths.push(rng.random_range(2..5));
        let specs = chain(&widths, acts[rng.random_range(0..3)], Activation::Identity);
        let count: usize = specs.iter().map(|s| s.param_count()).sum();
        if count > MAX_CLASSIFIER_PARAMS {
            continue;
        }
        // random biases too: zero biases behind a dead ReLU layer sit exactly on a kink
        let net = DenseNet::init(&specs, case).unwrap();
        let params: Vec<f64> = (0..count).map(|_| rng.random_range(-1.0..1.0)).collect();
        let net = net.with_params(params).unwrap();
        let batch = rng.random_range(1..6);
        let x: Vec<f64> = (0..batch * widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Matrix::from_vec(batch, widths[0], x).unwrap();
        let classes = *widths.last().unwrap();
        let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let coeffs: Vec<f64> = (0..batch).map(|_| rng.random_range(0.0..1.0)).collect();

        let (out, cache) = net.forward(&x).unwrap();
        let (_, upstream) = CrossEntropy.batch(&out, &y).unwrap();
        let grads = net.per_sample_gradients_with(&cache, &upstream, Exec::default()).unwrap();
        let loss_of = |p: &[f64], rows: &[usize], c: &[f64]| -> mwnet::Result<f64> {
            let n = net.with_params(p.to_vec())?;
            let (o, _) = n.forward(&x)?;
            let (l, _) = CrossEntropy.batch(&o, &y)?;
            Ok(rows.iter().zip(c).map(|(&i, ci)| ci * l[i]).sum())
        };
        for i in 0..batch {
            let fd = fd_gradient(|p| loss_of(p, &[i], &[1.0]), net.params(), 1e-5).unwrap();
            worst = worst.max(relative_error(grads.row(i), &fd));
            checked += 1;
        }
        let rows: Vec<usize> = (0..batch).collect();
        let fd = fd_gradient(|p| loss_of(p, &rows, &coeffs), net.params(), 1e-5).unwrap();
        worst = worst.max(relative_error(&grads.weighted_sum(&coeffs), &fd));
        checked += 1;
    }
    let elapsed = t.elapsed();
    outcome(
        worst <= CLASSIFIER_GRAD_TOL && elapsed < CLASSIFIER_GRAD_BUDGET,
        format!("{checked} gradients, max rel err {worst:.2e} (tol {CLASSIFIER_GRAD_TOL:.0e}), {elapsed:.2?}"),
    )
}

fn spearman_scores(report: &ExperimentReport) -> Vec<f64> {
    report
        .runs
        .iter()
        .map(|r| r.report.monotonicity().expect("probe curve has ≥ 10 points").score)
        .collect()
}

fn c3_imbalance_curve(runs: &mut Runs) -> Outcome {
    let (report, elapsed) = runs.imbalance();
    let scores = spearman_scores(report);
    let hits = scores.iter().filter(|&&s| s >= SPEARMAN_THRESHOLD).count();
    outcome(
        hits >= SEEDS_REQUIRED && *elapsed < IMBALANCE_BUDGET,
        format!(
            "Spearman {} ≥ {SPEARMAN_THRESHOLD} in {hits}/{} seeds, {elapsed:.2?}",
            fmt_list(&scores),
            scores.len()
        ),
    )
}

fn c4_noise_curve(runs: &mut Runs) -> Outcome {
    let scores = spearman_scores(runs.noise());
    let hits = scores.iter().filter(|&&s| s <= -SPEARMAN_THRESHOLD).count();
    outcome(
        hits >= SEEDS_REQUIRED,
        format!("Spearman {} ≤ -{SPEARMAN_THRESHOLD} in {hits}/{} seeds", fmt_list(&scores), scores.len()),
    )
}

fn c5_weight_separation(runs: &mut Runs) -> Outcome {
    let gaps: Vec<f64> = runs
        .noise()
        .runs
        .iter()
        .map(|r| match weight_separation(&r.report.weight_dist) {
            (Some(clean), Some(noisy)) => clean - noisy,
            _ => f64::NAN,
        })
        .collect();
    let hits = gaps.iter().filter(|&&g| g > 0.0).count();
    let (mean, _) = mean_std(&gaps);
    outcome(
        hits == gaps.len(),
        format!("clean − noisy mean weight {} in {hits}/{} seeds, mean gap {mean:.3}", fmt_list(&gaps), gaps.len()),
    )
}

fn accuracy_pair(report: &ExperimentReport) -> (f64, f64) {
    let uniform = report
        .baselines
        .iter()
        .find(|(b, _)| b.name() == "uniform")
        .expect("pinned config includes the uniform baseline");
    (report.summary().mean, summarize(&uniform.1).mean)
}

fn c6_accuracy_ordering(runs: &mut Runs) -> Outcome {
    let (nm, nb) = accuracy_pair(runs.noise());
    let (im, ib) = accuracy_pair(&runs.imbalance().0);
    let (cm, cb) = accuracy_pair(runs.clean());
    let passed = nm > nb && im > ib && (cm - cb).abs() <= CLEAN_PARITY;
    outcome(
        passed,
        format!(
            "noise {nm:.4} vs {nb:.4}, imbalance {im:.4} vs {ib:.4}, clean {cm:.4} vs {cb:.4} (|Δ| ≤ {CLEAN_PARITY})"
        ),
    )
}

fn c7_stability(runs: &mut Runs) -> Outcome {
    let pairs: Vec<(f64, f64)> = runs.noise().runs.iter().map(|r| stability_deciles(&r.report.stability)).collect();
    let hits = pairs.iter().filter(|(first, last)| last < first).count();
    let desc: Vec<String> = pairs.iter().map(|(f, l)| format!("{f:.2e}→{l:.2e}")).collect();
    outcome(
        hits >= SEEDS_REQUIRED,
        format!("first→last decile mean |Δw| [{}], decreased in {hits}/{} seeds", desc.join(", "), pairs.len()),
    )
}

fn c8_grad_norm_decay(runs: &mut Runs) -> Outcome {
    let mut desc = Vec::new();
    let mut hits = 0;
    let total = runs.noise().runs.len();
    for r in &runs.noise().runs {
        let ma = moving_average(&r.report.grad_norm_history(), MA_WINDOW);
        if ma.len() <= MA_WINDOW {
            desc.push("too few epochs".to_string());
            continue;
        }
        let (at10, last) = (ma[MA_WINDOW - 1], ma[ma.len() - 1]);
        if last < at10 {
            hits += 1;
        }
        desc.push(format!("{at10:.2e}→{last:.2e}"));
    }
    outcome(
        hits >= SEEDS_REQUIRED,
        format!("moving average epoch 10→final [{}], decreased in {hits}/{total} seeds", desc.join(", ")),
    )
}

fn circle_data(classes: usize, per_class: usize, seed: u64) -> BiasedDataset {
    gen_gaussians(&GaussianMixtureSpec::on_circle(classes, 3.0, 1.0, per_class), seed).unwrap()
}

fn within_3_sigma(count: usize, n: usize, p: f64) -> (bool, f64) {
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let z = (count as f64 - mean) / sigma.max(f64::MIN_POSITIVE);
    (z.abs() <= 3.0, z)
}

fn c9_bias_statistics(_: &mut Runs) -> Outcome {
    let mut failures = Vec::new();
    let mut max_z = 0.0f64;
    let ds = circle_data(4, NOISE_SAMPLES / 4, 9);
    for (seed, p) in [(1u64, 0.2), (2, 0.4), (3, 0.6), (4, 0.8)] {
        let c = ds.classes as f64;
        let noisy = apply_uniform_noise(&ds, p, seed).unwrap();
        let (ok, z) = within_3_sigma(noisy.corrupted_count(), noisy.len(), p * (c - 1.0) / c);
        max_z = max_z.max(z.abs());
        if !ok {
            failures.push(format!("uniform p={p}: z={z:.2}"));
        }
        let flipped = apply_flip_noise(&ds, p, seed).unwrap();
        let (ok, z) = within_3_sigma(flipped.corrupted_count(), flipped.len(), p);
        max_z = max_z.max(z.abs());
        if !ok {
            failures.push(format!("flip p={p}: z={z:.2}"));
        }
        if noisy.len() != NOISE_SAMPLES || flipped.len() != NOISE_SAMPLES {
            failures.push("sample count changed".into());
        }
    }
    let mut longtail_cases = 0;
    for (classes, base, factor) in [(10usize, 5000usize, 100.0f64), (10, 5000, 10.0), (3, 500, 20.0), (5, 1000, 50.0)] {
        let spec = ImbalanceSpec { base_count: base, factor };
        let mu = factor.powf(-1.0 / (classes - 1) as f64);
        let want: Vec<usize> = (0..classes).map(|i| (base as f64 * mu.powi(i as i32)).round() as usize).collect();
        let ds = circle_data(classes, base, 7);
        let lt = apply_longtail(&ds, &spec, 3).unwrap();
        let got: Vec<usize> = (0..classes).map(|k| lt.true_labels.iter().filter(|&&y| y == k).count()).collect();
        if got != want {
            failures.push(format!("long-tail c={classes} factor={factor}: {got:?} != {want:?}"));
        }
        if classes == 10 && factor == 100.0 && (got[0], got[9]) != (5000, 50) {
            failures.push(format!("5000→50 case gave {}→{}", got[0], got[9]));
        }
        longtail_cases += 1;
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("noise fractions within 3σ (max |z| {max_z:.2}), {longtail_cases} long-tail cases exact")
        } else {
            failures.join("; ")
        },
    )
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Dataset generation, a full experiment, and probing, each run twice.
fn c10_determinism(_: &mut Runs) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(TOY_CONFIG).unwrap();
    let mut trees = Vec::new();
    for k in 0..2 {
        let root = tmp.path().join(format!("rep{k}"));
        let (train, _, _) = mwnet::harness::build_datasets(&cfg, cfg.seeds[0]).unwrap();
        std::fs::create_dir_all(&root).unwrap();
        save_csv(&train, &root.join("data.csv")).unwrap();
        let report = run_experiment(&cfg).unwrap();
        report.write_dir(&root.join("train")).unwrap();
        let curve = probe_curve(&report.weight_nets[0], 0.0, 10.0, 50).unwrap();
        mwnet::harness::table::write(
            &root.join("probe.csv"),
            &["loss", "weight"],
            curve.iter().map(|(l, w)| vec![mwnet::fmt_float(*l), mwnet::fmt_float(*w)]),
        )
        .unwrap();
        trees.push(dir_bytes(&root));
    }
    let files = trees[0].len();
    let csvs = trees[0].iter().filter(|(n, _)| n.ends_with(".csv")).count();
    outcome(
        trees[0] == trees[1] && csvs > 0,
        format!("{files} files ({csvs} CSV) byte-identical across repeats"),
    )
}

fn c11_normalization(_: &mut Runs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut zero_ok = true;
    let mut zero_cases = 0;
    for k in 0..NORMALIZE_VECTORS {
        let n = rng.random_range(1..65);
        let mut raw: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => rng.random_range(0.0..1e-12),
                _ => rng.random_range(0.0..=1.0),
            })
            .collect();
        if k % 10 == 0 {
            raw.iter_mut().for_each(|v| *v = 0.0);
        }
        let tau = 10f64.powi(-rng.random_range(1..13));
        let eta = normalize(&raw, tau).unwrap();
        if raw.iter().any(|&v| v > 0.0) {
            worst = worst.max((eta.iter().sum::<f64>() - 1.0).abs());
        } else {
            zero_cases += 1;
            zero_ok &= eta.iter().all(|&e| e == 0.0);
        }
    }
    outcome(
        worst <= NORMALIZE_SUM_TOL && zero_ok,
        format!(
            "{NORMALIZE_VECTORS} vectors, max |Ση − 1| {worst:.1e} (tol {NORMALIZE_SUM_TOL:.0e}), {zero_cases} all-zero cases map to zero"
        ),
    )
}

type Criterion = (u8, &'static str, fn(&mut Runs) -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "meta-gradient exactness", c1_meta_gradient),
    (2, "classifier gradients", c2_classifier_gradients),
    (3, "imbalance curve shape", c3_imbalance_curve),
    (4, "noise curve shape", c4_noise_curve),
    (5, "clean/noisy weight separation", c5_weight_separation),
    (6, "accuracy ordering", c6_accuracy_ordering),
    (7, "weight stability", c7_stability),
    (8, "meta-gradient norm decay", c8_grad_norm_decay),
    (9, "bias generator statistics", c9_bias_statistics),
    (10, "determinism", c10_determinism),
    (11, "normalization invariants", c11_normalization),
];

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut runs = Runs::default();
    let mut failed = 0;
    let mut ran = 0;
    for &(id, name, check) in CRITERIA {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let t = Instant::now();
        let o = check(&mut runs);
        ran += 1;
        if !o.passed {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1?}]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
