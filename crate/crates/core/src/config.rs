//! JSON experiment configuration. Parsing is strict: unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::biasgen::{GaussianMixtureSpec, ImbalanceSpec, NoiseSpec};
use crate::error::{Error, Result};
use crate::harness::BaselineSpec;
use crate::metaopt::TrainConfig;
use crate::weightnet::parse_arch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSource {
    pub classes: usize,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub scale: f64,
    /// Training samples per class before any bias is applied.
    pub per_class: usize,
    pub test_per_class: usize,
}

impl GaussianSource {
    pub fn mixture(&self) -> GaussianMixtureSpec {
        GaussianMixtureSpec {
            classes: self.classes,
            dim: self.dim,
            means: self.means.clone(),
            scale: self.scale,
            per_class: self.per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Gaussian(GaussianSource),
    /// Dataset CSV files; the meta set is carved from clean training samples.
    File { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    #[serde(default)]
    pub imbalance: Option<ImbalanceSpec>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub per_class: usize,
}

fn default_arch() -> String {
    "1-100-1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub classifier_hidden: Vec<usize>,
    /// Weight net architecture string, e.g. `1-100-1` or `1-10-10-1`.
    #[serde(default = "default_arch")]
    pub weight_net: String,
}

impl ModelConfig {
    pub fn weight_net_hidden(&self) -> Result<Vec<usize>> {
        parse_arch(&self.weight_net)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn default_tracked() -> usize {
    10
}

fn default_probe_steps() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub bias: BiasConfig,
    pub meta: MetaConfig,
    pub model: ModelConfig,
    pub optim: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub baselines: Vec<BaselineSpec>,
    #[serde(default = "default_tracked")]
    pub tracked: usize,
    #[serde(default = "default_probe_steps")]
    pub probe_steps: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        // relative dataset paths resolve against the config file's directory
        if let DatasetSource::File { train, test } = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [train, test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if let DatasetSource::Gaussian(g) = &self.dataset {
            g.mixture().validate()?;
            if g.test_per_class == 0 {
                return Err(Error::Config("dataset.gaussian.test_per_class must be ≥ 1".into()));
            }
        }
        if self.model.classifier_hidden.contains(&0) {
            return Err(Error::Config("model.classifier_hidden widths must be ≥ 1".into()));
        }
        self.model.weight_net_hidden()?;
        self.optim.validate()?;
        if let Some(n) = &self.bias.noise {
            if !(0.0..=1.0).contains(&n.rate) {
                return Err(Error::Config(format!("bias.noise.rate must be in [0, 1], got {}", n.rate)));
            }
        }
        for b in &self.baselines {
            b.validate()?;
        }
        if self.probe_steps < 10 {
            return Err(Error::Config("probe_steps must be ≥ 10".into()));
        }
        Ok(())
    }

    /// Number of classes, when known without reading files.
    pub fn classes(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSource::Gaussian(g) => Some(g.classes),
            DatasetSource::File { .. } => None,
        }
    }

    /// Resolved config recorded alongside a run.
    pub fn echo(&self, seed: u64) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        v["seed"] = serde_json::json!(seed);
        Ok(v)
    }
}
