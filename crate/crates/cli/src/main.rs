use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mwnet::biasgen::{gen_gaussians_with, load_csv, save_csv, stream, streams};
use mwnet::config::DatasetSource;
use mwnet::harness::{self, line_svg, table, weight_separation, RunReport};
use mwnet::weightnet::{parse_arch, probe_curve};
use mwnet::{gradcheck, BaselineSpec, Error, ExperimentConfig, MWNet};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "mwnet", version, about = "Learned sample weighting via a meta-trained weight net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the biased training set described by a config and write it as CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the learned weighting (and any baselines) for every seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Report directory; defaults to output.dir from the config, then `runs`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the configured seed list with one seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Adds a fixed-weighting baseline run; repeatable.
        #[arg(long, value_enum)]
        baseline: Vec<BaselineArg>,
    },
    /// Evaluate a weight net on a loss grid and write `loss,weight` rows.
    Probe {
        /// A `weight_net.json` written by `train`; a fresh net is used when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Architecture of the fresh net.
        #[arg(long, default_value = "1-100-1")]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        min: f64,
        #[arg(long, default_value_t = 10.0)]
        max: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the analytic meta-gradient with central finite differences.
    Gradcheck {
        /// JSON gradient-check setup; the built-in small setup when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Negate the analytic gradient (checker self-test; must fail).
        #[arg(long, hide = true)]
        corrupt_sign: bool,
    },
    /// Render plots and a text summary for a report directory.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Uniform,
    Ramp,
    Step,
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(&config, &out, seed),
        Command::Train { config, out, seed, baseline } => cmd_train(&config, out, seed, &baseline),
        Command::Probe { model, arch, seed, min, max, steps, out } => {
            cmd_probe(model.as_deref(), &arch, seed, min, max, steps, out.as_deref())
        }
        Command::Gradcheck { config, seed, instances, corrupt_sign } => {
            cmd_gradcheck(config.as_deref(), seed, instances, corrupt_sign)
        }
        Command::Report { dir } => cmd_report(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}

/// A config that cannot be read is a config error, not a runtime one.
fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        e => e,
    })
}

fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let ds = match &cfg.dataset {
        DatasetSource::Gaussian(g) => {
            let spec = g.mixture();
            gen_gaussians_with(&spec, spec.per_class, &mut stream(seed, streams::TRAIN_DATA))?
        }
        DatasetSource::File { train, .. } => load_csv(train)?,
    };
    let ds = harness::apply_bias(&cfg, ds, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_csv(&ds, out)?;
    println!("wrote {} samples ({} corrupted) to {}", ds.len(), ds.corrupted_count(), out.display());
    Ok(())
}

fn class_count(cfg: &ExperimentConfig) -> Result<usize, Error> {
    match &cfg.dataset {
        DatasetSource::Gaussian(g) => Ok(g.classes),
        DatasetSource::File { train, .. } => Ok(load_csv(train)?.classes),
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>, baselines: &[BaselineArg]) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if !baselines.is_empty() {
        let c = class_count(&cfg)?;
        for b in baselines {
            let spec = match b {
                BaselineArg::Uniform => BaselineSpec::Uniform,
                BaselineArg::Ramp => BaselineSpec::Ramp { gamma: 1.0 },
                BaselineArg::Step => BaselineSpec::Step { lambda: (c as f64).ln() },
            };
            if !cfg.baselines.iter().any(|x| x.name() == spec.name()) {
                cfg.baselines.push(spec);
            }
        }
    }
    let out = out
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let report = harness::run_experiment(&cfg)?;
    report.write_dir(&out)?;
    for run in &report.runs {
        for w in &run.report.warnings {
            eprintln!("warning (seed {}): {w}", run.seed);
        }
    }
    let s = report.summary();
    println!("mwnet: mean accuracy {:.4} ± {:.4} over {} seeds", s.mean, s.std, s.count);
    for (spec, runs) in &report.baselines {
        let s = harness::summarize(runs);
        println!("{}: mean accuracy {:.4} ± {:.4} over {} seeds", spec.name(), s.mean, s.std, s.count);
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_probe(
    model: Option<&Path>,
    arch: &str,
    seed: u64,
    min: f64,
    max: f64,
    steps: usize,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let theta = match model {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<MWNet>(&text).map_err(|e| Error::format(p, e.to_string()))?
        }
        None => MWNet::new(&parse_arch(arch)?, seed)?,
    };
    let curve = probe_curve(&theta, min, max, steps)?;
    let rows = curve.iter().map(|(l, w)| vec![mwnet::fmt_float(*l), mwnet::fmt_float(*w)]);
    match out {
        Some(p) => table::write(p, &["loss", "weight"], rows)?,
        None => {
            let mut s = String::from("loss,weight\n");
            for r in rows {
                s.push_str(&r.join(","));
                s.push('\n');
            }
            std::io::stdout()
                .write_all(s.as_bytes())
                .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
        }
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, seed: u64, instances: usize, corrupt_sign: bool) -> Result<(), Failure> {
    let setup = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<gradcheck::GradcheckSetup>(&text).map_err(Error::from)?
        }
        None => gradcheck::GradcheckSetup::default(),
    };
    if instances < 20 {
        return Err(Error::Config(format!("gradcheck needs at least 20 instances, got {instances}")).into());
    }
    let seeds: Vec<u64> = (0..instances as u64).map(|k| seed + k).collect();
    let outcome = gradcheck::run(&setup, &seeds, corrupt_sign)?;
    let worst = outcome
        .instances
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("at least one instance");
    println!(
        "gradcheck: {} checks ({} seeds × 2 modes), max relative error {:.3e} (seed {}, normalize {}), tolerance {:.0e}",
        outcome.instances.len(),
        seeds.len(),
        worst.rel_error,
        worst.seed,
        worst.normalize,
        outcome.tolerance
    );
    if outcome.passed() {
        println!("PASS");
        Ok(())
    } else {
        let bad = outcome.instances.iter().filter(|r| r.rel_error > outcome.tolerance).count();
        println!("FAIL");
        Err(Failure::Check(format!("{bad} checks exceed the tolerance")))
    }
}

/// Run directories under `dir`: itself if it holds metrics, else the seed
/// and baseline subdirectories written by `train`.
fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    if dir.join("metrics.csv").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&d) else { continue };
        for e in entries {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                if p.join("metrics.csv").exists() {
                    found.push(p);
                } else {
                    stack.push(p);
                }
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::Data(format!("no metrics.csv found under {}", dir.display())));
    }
    Ok(found)
}

fn cmd_report(dir: &Path) -> Result<(), Failure> {
    let runs = run_dirs(dir)?;
    let mut summary = String::new();
    for d in &runs {
        let report = RunReport::read_dir(d)?;
        let name = d.strip_prefix(dir).unwrap_or(d).display().to_string();
        let name = if name.is_empty() { ".".to_string() } else { name };
        let acc: Vec<(f64, f64)> = report.epochs.iter().map(|e| (e.epoch as f64, e.test_accuracy)).collect();
        write(&d.join("weight_curve.svg"), &line_svg("weighting function", "loss", "weight", &report.weight_curve))?;
        write(&d.join("accuracy.svg"), &line_svg("test accuracy", "epoch", "accuracy", &acc))?;
        let mono = report.monotonicity()?;
        summary.push_str(&format!("[{name}]\n"));
        summary.push_str(&format!("final_accuracy = {:.4}\n", report.final_accuracy()));
        summary.push_str(&format!(
            "monotonicity = {:.4}{}\n",
            mono.score,
            if mono.degenerate { " (constant curve)" } else { "" }
        ));
        if let (Some(clean), Some(noisy)) = weight_separation(&report.weight_dist) {
            summary.push_str(&format!("mean_weight_clean = {clean:.4}\nmean_weight_noisy = {noisy:.4}\n"));
        }
        for w in &report.warnings {
            summary.push_str(&format!("warning = {w}\n"));
        }
        summary.push('\n');
    }
    write(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
