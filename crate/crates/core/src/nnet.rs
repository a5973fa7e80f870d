//! Dense feed-forward networks with manual forward/backward passes.
//!
//! Parameters live in one flat vector. For each layer in order, the weight
//! matrix (shape `output_dim × input_dim`, row-major) is followed by the bias
//! vector. Every gradient vector in the crate uses this same layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_shape, Error, Result};
use crate::exec::Exec;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// The ReLU subgradient at 0 is 0.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

/// Builds a layer chain from a width list, e.g. `[2, 8, 3]`: hidden layers
/// use `hidden`, the last layer uses `output`.
pub fn chain(widths: &[usize], hidden: Activation, output: Activation) -> Vec<LayerSpec> {
    let n = widths.len().saturating_sub(1);
    (0..n)
        .map(|k| {
            let act = if k + 1 == n { output } else { hidden };
            LayerSpec::new(widths[k], widths[k + 1], act)
        })
        .collect()
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (k, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(Error::Config(format!("layer {k} has a zero dimension")));
        }
    }
    for (k, pair) in specs.windows(2).enumerate() {
        if pair[0].output_dim != pair[1].input_dim {
            return Err(Error::Config(format!(
                "layer {} outputs {} but layer {} expects {}",
                k,
                pair[0].output_dim,
                k + 1,
                pair[1].input_dim
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseNet {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
}

/// Intermediates of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the input batch, `acts[k + 1]` the output of layer `k`.
    acts: Vec<Matrix>,
    /// Pre-activations per layer.
    pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.acts[0].rows()
    }

    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("cache always holds the input")
    }
}

/// One gradient row per sample, `batch_size × param_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGrads(pub Matrix);

impl PerSampleGrads {
    pub fn batch_size(&self) -> usize {
        self.0.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// Σ_i coeffs[i] · row_i, accumulated in row order.
    pub fn weighted_sum(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.0.cols()];
        for (i, &c) in coeffs.iter().enumerate() {
            if c != 0.0 {
                crate::matrix::axpy(c, self.0.row(i), &mut out);
            }
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.batch_size();
        self.weighted_sum(&vec![1.0 / n as f64; n])
    }
}

impl DenseNet {
    /// Gaussian init: std √(2/input_dim) for ReLU layers, √(1/input_dim)
    /// otherwise. Biases start at zero.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.iter().map(LayerSpec::param_count).sum());
        for s in specs {
            let gain = match s.activation {
                Activation::ReLU => 2.0,
                _ => 1.0,
            };
            let normal = Normal::new(0.0, (gain / s.input_dim as f64).sqrt())
                .expect("positive std");
            params.extend((0..s.input_dim * s.output_dim).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, s.output_dim));
        }
        Ok(Self {
            layers: specs.to_vec(),
            params,
        })
    }

    pub fn from_params(specs: &[LayerSpec], params: Vec<f64>) -> Result<Self> {
        validate_specs(specs)?;
        let expected = specs.iter().map(LayerSpec::param_count).sum();
        ensure_shape("DenseNet::from_params", expected, params.len())?;
        ensure_finite("network parameters", &params)?;
        Ok(Self {
            layers: specs.to_vec(),
            params,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Returns a copy carrying different parameters of the same shape.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        ensure_shape("DenseNet::with_params", self.params.len(), params.len())?;
        Ok(Self {
            layers: self.layers.clone(),
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    /// Offset of each layer's weight block in the flat parameter vector.
    fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|s| {
                let o = off;
                off += s.param_count();
                o
            })
            .collect()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        ensure_shape("forward input columns", self.input_dim(), batch.cols())?;
        ensure_finite("forward input", batch.as_slice())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(batch.clone());
        let mut off = 0;
        for spec in &self.layers {
            let (w, rest) = self.params[off..].split_at(spec.input_dim * spec.output_dim);
            let b = &rest[..spec.output_dim];
            let input = acts.last().expect("non-empty");
            let mut z = Matrix::zeros(batch.rows(), spec.output_dim);
            let mut a = Matrix::zeros(batch.rows(), spec.output_dim);
            for i in 0..batch.rows() {
                let x = input.row(i);
                for o in 0..spec.output_dim {
                    let zo = crate::matrix::dot(&w[o * spec.input_dim..(o + 1) * spec.input_dim], x)
                        + b[o];
                    z.set(i, o, zo);
                    a.set(i, o, spec.activation.apply(zo));
                }
            }
            pre.push(z);
            acts.push(a);
            off += spec.param_count();
        }
        let out = acts.last().expect("non-empty").clone();
        Ok((out, ForwardCache { acts, pre }))
    }

    /// Outputs only.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward(batch).map(|(out, _)| out)
    }

    /// Gradient of one sample's scalar loss given `upstream = ∂loss/∂output`.
    fn sample_gradient(&self, offsets: &[usize], cache: &ForwardCache, i: usize, upstream: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = upstream
            .iter()
            .enumerate()
            .map(|(o, &g)| {
                let act = self.layers[last].activation;
                g * act.derivative(cache.pre[last].get(i, o), cache.acts[last + 1].get(i, o))
            })
            .collect();
        for k in (0..self.layers.len()).rev() {
            let spec = self.layers[k];
            let off = offsets[k];
            let a_prev = cache.acts[k].row(i);
            for o in 0..spec.output_dim {
                let d = delta[o];
                let row = &mut grad[off + o * spec.input_dim..off + (o + 1) * spec.input_dim];
                for (g, &a) in row.iter_mut().zip(a_prev) {
                    *g = d * a;
                }
                grad[off + spec.input_dim * spec.output_dim + o] = d;
            }
            if k > 0 {
                let w = &self.params[off..off + spec.input_dim * spec.output_dim];
                let below = self.layers[k - 1].activation;
                delta = (0..spec.input_dim)
                    .map(|j| {
                        let mut s = 0.0;
                        for (o, &d) in delta.iter().enumerate() {
                            s += w[o * spec.input_dim + j] * d;
                        }
                        s * below.derivative(cache.pre[k - 1].get(i, j), cache.acts[k].get(i, j))
                    })
                    .collect();
            }
        }
        grad
    }

    /// Row `i` of the result is ∂loss_i/∂params, where `upstream` row `i`
    /// holds ∂loss_i/∂output for sample `i`.
    pub fn per_sample_gradients(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<PerSampleGrads> {
        self.per_sample_gradients_with(cache, upstream, Exec::default())
    }

    pub fn per_sample_gradients_with(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
        exec: Exec,
    ) -> Result<PerSampleGrads> {
        ensure_shape("upstream rows", cache.batch_size(), upstream.rows())?;
        ensure_shape("upstream columns", self.output_dim(), upstream.cols())?;
        ensure_shape("cache depth", self.layers.len() + 1, cache.acts.len())?;
        let offsets = self.offsets();
        let rows = exec.map(cache.batch_size(), |i| {
            self.sample_gradient(&offsets, cache, i, upstream.row(i))
        });
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        ensure_finite("per-sample gradients", &data)?;
        Ok(PerSampleGrads(Matrix::from_vec(
            cache.batch_size(),
            self.params.len(),
            data,
        )?))
    }
}

/// Central-difference gradient estimate, one coordinate at a time.
pub fn fd_gradient<F>(mut loss: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + eps;
        let up = loss(&p)?;
        p[k] = orig - eps;
        let down = loss(&p)?;
        p[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference loss evaluation"));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn plain(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn step(&self, params: &mut [f64], grad: &[f64], velocity: &mut [f64]) -> Result<()> {
        ensure_shape("sgd gradient", params.len(), grad.len())?;
        ensure_shape("sgd velocity", params.len(), velocity.len())?;
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}
