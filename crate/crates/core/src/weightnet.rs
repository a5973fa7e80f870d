//! The weighting network: a scalar loss goes in, a weight in `[0, 1]` comes out.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::matrix::Matrix;
use crate::nnet::{chain, Activation, DenseNet, PerSampleGrads};

/// Hidden widths of the default 1–100–1 architecture.
pub const DEFAULT_HIDDEN: &[usize] = &[100];

/// Default guard added to the normalizer when every raw weight is zero.
pub const DEFAULT_TAU: f64 = 1e-8;

/// A one-input, one-output MLP with ReLU hidden layers and a sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseNet", into = "DenseNet")]
pub struct MWNet {
    net: DenseNet,
}

impl TryFrom<DenseNet> for MWNet {
    type Error = Error;

    fn try_from(net: DenseNet) -> Result<Self> {
        Self::from_net(net)
    }
}

impl From<MWNet> for DenseNet {
    fn from(m: MWNet) -> Self {
        m.net
    }
}

impl MWNet {
    /// Random hidden layers and a zero output layer, so a fresh net weights
    /// every loss at exactly 0.5.
    pub fn new(hidden: &[usize], seed: u64) -> Result<Self> {
        let mut m = Self::random(hidden, seed)?;
        let specs = Self::specs(hidden);
        let out = specs[specs.len() - 1].param_count();
        let n = m.param_count();
        m.params_mut()[n - out..].fill(0.0);
        Ok(m)
    }

    /// Every layer randomly initialized, output layer included.
    pub fn random(hidden: &[usize], seed: u64) -> Result<Self> {
        Self::from_net(DenseNet::init(&Self::specs(hidden), seed)?)
    }

    pub fn specs(hidden: &[usize]) -> Vec<crate::nnet::LayerSpec> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(1);
        widths.extend_from_slice(hidden);
        widths.push(1);
        chain(&widths, Activation::ReLU, Activation::Sigmoid)
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        let last = net.layers()[net.layers().len() - 1];
        if net.input_dim() != 1 || net.output_dim() != 1 {
            return Err(Error::Config(format!(
                "weight net must map 1 → 1, got {} → {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        if last.activation != Activation::Sigmoid {
            return Err(Error::Config("weight net output layer must be sigmoid".into()));
        }
        Ok(Self { net })
    }

    /// Same shape with every parameter zero; outputs 0.5 everywhere.
    pub fn zeroed(hidden: &[usize]) -> Result<Self> {
        let specs = Self::specs(hidden);
        let count = specs.iter().map(|s| s.param_count()).sum();
        Self::from_net(DenseNet::from_params(&specs, vec![0.0; count])?)
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Ok(Self {
            net: self.net.with_params(params)?,
        })
    }

    /// Index of the output bias in the flat parameter vector.
    pub fn output_bias_index(&self) -> usize {
        self.param_count() - 1
    }

    /// Raw weights `V(loss_i; Θ)`.
    pub fn weights(&self, losses: &[f64]) -> Result<Vec<f64>> {
        ensure_finite("weight net input losses", losses)?;
        Ok(self.net.predict(&Matrix::column(losses))?.into_vec())
    }

    /// Row `j` is ∂V(loss_j; Θ)/∂Θ.
    pub fn jacobian(&self, losses: &[f64]) -> Result<PerSampleGrads> {
        ensure_finite("weight net input losses", losses)?;
        let (_, cache) = self.net.forward(&Matrix::column(losses))?;
        let ones = Matrix::from_vec(losses.len(), 1, vec![1.0; losses.len()])?;
        self.net.per_sample_gradients(&cache, &ones)
    }
}

/// Raw weights of a batch together with their normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub tau: f64,
}

impl WeightVector {
    pub fn new(raw: Vec<f64>, tau: f64) -> Result<Self> {
        let normalized = normalize(&raw, tau)?;
        Ok(Self { raw, normalized, tau })
    }
}

/// `η_i = V_i / (Σ V + δ(Σ V))` where `δ(0) = τ` and `δ(a) = 0` otherwise.
pub fn normalize(raw: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    if let Some(v) = raw.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("raw weight {v} outside [0, 1]")));
    }
    let sum: f64 = raw.iter().sum();
    let denom = if sum == 0.0 { sum + tau } else { sum };
    Ok(raw.iter().map(|v| v / denom).collect())
}

/// Evaluates the weight net on an evenly spaced loss grid.
pub fn probe_curve(theta: &MWNet, loss_min: f64, loss_max: f64, steps: usize) -> Result<Vec<(f64, f64)>> {
    if !(loss_min < loss_max) || !loss_min.is_finite() || !loss_max.is_finite() {
        return Err(Error::Config(format!(
            "probe range must satisfy min < max, got [{loss_min}, {loss_max}]"
        )));
    }
    if steps < 2 {
        return Err(Error::Config(format!("probe needs at least 2 steps, got {steps}")));
    }
    let last = (steps - 1) as f64;
    let grid: Vec<f64> = (0..steps)
        .map(|k| {
            if k == steps - 1 {
                loss_max
            } else {
                loss_min + (loss_max - loss_min) * (k as f64 / last)
            }
        })
        .collect();
    let weights = theta.weights(&grid)?;
    Ok(grid.into_iter().zip(weights).collect())
}

/// Parses an architecture string such as `1-100-1` or `1-10-10-1` into its
/// hidden widths.
pub fn parse_arch(s: &str) -> Result<Vec<usize>> {
    let widths: Vec<usize> = s
        .split('-')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad architecture string {s:?}")))?;
    if widths.len() < 2 || widths[0] != 1 || widths[widths.len() - 1] != 1 || widths.contains(&0) {
        return Err(Error::Config(format!(
            "weight net architecture must look like 1-h-...-1, got {s:?}"
        )));
    }
    Ok(widths[1..widths.len() - 1].to_vec())
}
