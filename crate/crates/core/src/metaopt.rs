//! Online bilevel optimization of a classifier and its weighting network.
//!
//! One iteration on a training batch of size `n` and a meta batch of size `m`:
//!
//! 1. virtual step: `ŵ(Θ) = w − α Σ_j c_j(Θ) ∇L_j(w)`, with `c_j = V(L_j; Θ)/n`
//!    or the batch-normalized `η_j`;
//! 2. weight-net step: `Θ ← Θ − β ∇_Θ mean_i L_i^meta(ŵ(Θ))`;
//! 3. classifier step with the weights recomputed under the new `Θ`.
//!
//! The meta-gradient in step 2 is assembled analytically from the similarity
//! matrix `G_ij = ⟨∇L_i^meta(ŵ), ∇L_j^train(w)⟩` and the Jacobian of the
//! weight net; [`meta_gradient_fd`] is an independent central-difference
//! oracle for it. Losses enter the weight net as constants: no gradient flows
//! from a weight back into `w` through its loss input.

use serde::{Deserialize, Serialize};

use crate::biasgen::{sample_batch, stream, streams, Batch, BiasedDataset};
use crate::error::{ensure_finite, ensure_shape, Error, Result};
use crate::exec::Exec;
use crate::harness::{self, BaselineSpec, EpochMetrics, RunReport};
use crate::loss::{CrossEntropy, SampleLoss};
use crate::matrix::{axpy, dot, norm, Matrix};
use crate::nnet::{DenseNet, PerSampleGrads, Sgd};
use crate::weightnet::{normalize, MWNet, WeightVector, DEFAULT_TAU};

fn default_true() -> bool {
    true
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Classifier step size.
    pub alpha: f64,
    /// Weight-net step size.
    pub beta: f64,
    /// Training mini-batch size.
    pub n: usize,
    /// Meta mini-batch size.
    pub m: usize,
    /// Iteration budget.
    pub iterations: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Normalize batch weights to sum to one instead of scaling by `1/n`.
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// `(iteration, multiplier)`: from `iteration` on, the step size is
    /// `alpha · multiplier`. Pairs are applied in iteration order.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    /// Set per run by the experiment driver.
    #[serde(skip)]
    pub seed: u64,
}

impl TrainConfig {
    /// Pure update equations: unnormalized weights, no momentum or decay.
    pub fn pure(alpha: f64, beta: f64, n: usize, m: usize) -> Self {
        Self {
            alpha,
            beta,
            n,
            m,
            iterations: 1,
            tau: DEFAULT_TAU,
            normalize: false,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_schedule: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        if self.n < 1 || self.m < 1 || self.iterations < 1 {
            return Err(Error::Config("n, m and iterations must all be ≥ 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        self.classifier_sgd(self.alpha).validate()?;
        if let Some((it, mult)) = self.lr_schedule.iter().find(|(_, m)| !(*m >= 0.0)) {
            return Err(Error::Config(format!("lr_schedule multiplier at {it} is {mult}")));
        }
        Ok(())
    }

    /// Classifier step size at `iteration`.
    pub fn alpha_at(&self, iteration: usize) -> f64 {
        let mut sched: Vec<&(usize, f64)> = self.lr_schedule.iter().collect();
        sched.sort_by_key(|(it, _)| *it);
        let mult = sched
            .iter()
            .take_while(|(it, _)| *it <= iteration)
            .last()
            .map_or(1.0, |(_, m)| *m);
        self.alpha * mult
    }

    fn classifier_sgd(&self, lr: f64) -> Sgd {
        Sgd {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Per-sample coefficients of the weighted gradient.
    pub fn coefficients(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if self.normalize {
            normalize(raw, self.tau)
        } else {
            let n = raw.len() as f64;
            Ok(raw.iter().map(|v| v / n).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub w: DenseNet,
    pub theta: MWNet,
    pub velocity: Vec<f64>,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(w: DenseNet, theta: MWNet) -> Self {
        let velocity = vec![0.0; w.param_count()];
        Self {
            w,
            theta,
            velocity,
            iteration: 0,
        }
    }
}

/// Per-sample losses and parameter gradients of a labelled batch.
pub fn batch_gradients(net: &DenseNet, batch: &Batch, exec: Exec) -> Result<(Vec<f64>, PerSampleGrads)> {
    let (out, cache) = net.forward(&batch.x)?;
    let (losses, upstream) = CrossEntropy.batch(&out, &batch.y)?;
    let grads = net.per_sample_gradients_with(&cache, &upstream, exec)?;
    Ok((losses, grads))
}

/// Per-sample losses without gradients.
pub fn batch_losses(net: &DenseNet, batch: &Batch) -> Result<Vec<f64>> {
    let out = net.predict(&batch.x)?;
    Ok(CrossEntropy.batch(&out, &batch.y)?.0)
}

/// Weighted training objective on one batch: `Σ c_i L_i`.
pub fn weighted_train_loss(w: &DenseNet, theta: &MWNet, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let losses = batch_losses(w, batch)?;
    let coeffs = cfg.coefficients(&theta.weights(&losses)?)?;
    let total = dot(&coeffs, &losses);
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::NonFinite("weighted training loss"))
    }
}

/// Output of the virtual classifier step, kept for reuse in the same iteration.
#[derive(Debug, Clone)]
pub struct VirtualStep {
    pub w_hat: Vec<f64>,
    pub losses: Vec<f64>,
    pub grads: PerSampleGrads,
    pub weights: WeightVector,
    pub coeffs: Vec<f64>,
}

fn virtual_from_grads(
    w: &DenseNet,
    theta: &MWNet,
    losses: Vec<f64>,
    grads: PerSampleGrads,
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<VirtualStep> {
    let raw = theta.weights(&losses)?;
    let coeffs = cfg.coefficients(&raw)?;
    let step = grads.weighted_sum(&coeffs);
    let mut w_hat = w.params().to_vec();
    axpy(-alpha, &step, &mut w_hat);
    ensure_finite("virtual parameters", &w_hat)?;
    Ok(VirtualStep {
        w_hat,
        losses,
        grads,
        weights: WeightVector::new(raw, cfg.tau)?,
        coeffs,
    })
}

/// Plain SGD step on the weighted objective, always without momentum or
/// weight decay.
pub fn virtual_update(state: &TrainState, batch: &Batch, alpha: f64, cfg: &TrainConfig) -> Result<VirtualStep> {
    virtual_update_with(state, batch, alpha, cfg, Exec::default())
}

pub fn virtual_update_with(state: &TrainState, batch: &Batch, alpha: f64, cfg: &TrainConfig, exec: Exec) -> Result<VirtualStep> {
    ensure_shape("training batch size", cfg.n, batch.len())?;
    let (losses, grads) = batch_gradients(&state.w, batch, exec)?;
    virtual_from_grads(&state.w, &state.theta, losses, grads, alpha, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradientReport {
    /// Descent direction for Θ: the update is `Θ ← Θ − β·grad_theta`.
    pub grad_theta: Vec<f64>,
    /// `G[i][j] = ⟨∇L_i^meta(ŵ), ∇L_j^train(w)⟩`, shape `m × n`.
    pub g: Matrix,
    /// `(1/m) Σ_i G_ij` per training sample.
    pub mean_g_per_j: Vec<f64>,
    /// `∂(mean meta loss)/∂V_j`: the scalar multiplying `∂V_j/∂Θ` in
    /// `grad_theta`.
    pub dmeta_dweight: Vec<f64>,
    /// Raw weights used in the virtual step.
    pub per_sample_weights: Vec<f64>,
    /// Mean meta loss at `ŵ`.
    pub meta_loss: f64,
}

/// Chain rule from `a_j = −α·mean_i G_ij = ∂M/∂c_j` to `∂M/∂V_j`.
///
/// Unnormalized, `c_j = V_j/n`. Normalized, `c_j = V_j/S` with `S = Σ V`, so
/// `∂M/∂V_k = (a_k − Σ_j η_j a_j)/S`; when `S = 0` the guard makes it `a_k/τ`.
pub fn dmeta_dweight(alpha: f64, mean_g: &[f64], raw: &[f64], cfg: &TrainConfig) -> Vec<f64> {
    let a: Vec<f64> = mean_g.iter().map(|g| -alpha * g).collect();
    if !cfg.normalize {
        let n = raw.len() as f64;
        return a.into_iter().map(|ak| ak / n).collect();
    }
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        return a.into_iter().map(|ak| ak / cfg.tau).collect();
    }
    let mut weighted = 0.0;
    for (&v, &ak) in raw.iter().zip(&a) {
        weighted += (v / s) * ak;
    }
    a.into_iter().map(|ak| (ak - weighted) / s).collect()
}

/// `Σ_j dmeta_dweight_j · ∂V_j/∂Θ`.
pub fn theta_gradient(alpha: f64, mean_g: &[f64], raw: &[f64], jacobian: &PerSampleGrads, cfg: &TrainConfig) -> Vec<f64> {
    jacobian.weighted_sum(&dmeta_dweight(alpha, mean_g, raw, cfg))
}

fn meta_gradient_from(
    state: &TrainState,
    vstep: &VirtualStep,
    meta: &Batch,
    alpha: f64,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<MetaGradientReport> {
    ensure_shape("meta batch size", cfg.m, meta.len())?;
    let w_hat = state.w.with_params(vstep.w_hat.clone())?;
    let (meta_losses, meta_grads) = batch_gradients(&w_hat, meta, exec)?;
    let (m, n) = (meta.len(), vstep.losses.len());
    let rows = exec.map(m, |i| {
        (0..n)
            .map(|j| dot(meta_grads.row(i), vstep.grads.row(j)))
            .collect::<Vec<f64>>()
    });
    let g = Matrix::from_vec(m, n, rows.into_iter().flatten().collect())?;
    let mean_g_per_j: Vec<f64> = (0..n)
        .map(|j| {
            let mut s = 0.0;
            for i in 0..m {
                s += g.get(i, j);
            }
            s / m as f64
        })
        .collect();
    let jac = state.theta.jacobian(&vstep.losses)?;
    let dmeta = dmeta_dweight(alpha, &mean_g_per_j, &vstep.weights.raw, cfg);
    let grad_theta = jac.weighted_sum(&dmeta);
    ensure_finite("meta-gradient", &grad_theta)?;
    Ok(MetaGradientReport {
        grad_theta,
        g,
        mean_g_per_j,
        dmeta_dweight: dmeta,
        per_sample_weights: vstep.weights.raw.clone(),
        meta_loss: meta_losses.iter().sum::<f64>() / m as f64,
    })
}

/// Analytic gradient of the mean meta loss at `ŵ(Θ)` with respect to Θ.
pub fn meta_gradient_direct(
    state: &TrainState,
    train: &Batch,
    meta: &Batch,
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<MetaGradientReport> {
    let vstep = virtual_update(state, train, alpha, cfg)?;
    meta_gradient_from(state, &vstep, meta, alpha, cfg, Exec::default())
}

/// Mean meta loss after a virtual step taken with weight-net parameters `theta`.
pub fn meta_loss_at(state: &TrainState, theta: &MWNet, train: &Batch, meta: &Batch, alpha: f64, cfg: &TrainConfig) -> Result<f64> {
    let probe = TrainState {
        theta: theta.clone(),
        ..state.clone()
    };
    let vstep = virtual_update(&probe, train, alpha, cfg)?;
    let w_hat = state.w.with_params(vstep.w_hat)?;
    let losses = batch_losses(&w_hat, meta)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Central differences of [`meta_loss_at`] over each Θ coordinate.
pub fn meta_gradient_fd(
    state: &TrainState,
    train: &Batch,
    meta: &Batch,
    alpha: f64,
    cfg: &TrainConfig,
    eps: f64,
) -> Result<Vec<f64>> {
    crate::nnet::fd_gradient(
        |p| meta_loss_at(state, &state.theta.with_params(p.to_vec())?, train, meta, alpha, cfg),
        state.theta.params(),
        eps,
    )
}

/// Plain SGD on Θ.
pub fn update_theta(state: &mut TrainState, grad_theta: &[f64], beta: f64) -> Result<()> {
    ensure_shape("theta gradient", state.theta.param_count(), grad_theta.len())?;
    axpy(-beta, grad_theta, state.theta.params_mut());
    ensure_finite("weight net parameters", state.theta.params())
}

/// Classifier step from cached per-sample gradients and given raw weights.
pub fn update_classifier_with(
    state: &mut TrainState,
    grads: &PerSampleGrads,
    raw_weights: &[f64],
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    ensure_shape("classifier weights", grads.batch_size(), raw_weights.len())?;
    let coeffs = cfg.coefficients(raw_weights)?;
    let grad = grads.weighted_sum(&coeffs);
    cfg.classifier_sgd(alpha)
        .step(state.w.params_mut(), &grad, &mut state.velocity)?;
    ensure_finite("classifier parameters", state.w.params())
}

/// Classifier step on `batch` with weights from the current Θ.
pub fn update_classifier(state: &mut TrainState, batch: &Batch, alpha: f64, cfg: &TrainConfig) -> Result<()> {
    let (losses, grads) = batch_gradients(&state.w, batch, Exec::default())?;
    let raw = state.theta.weights(&losses)?;
    update_classifier_with(state, &grads, &raw, alpha, cfg)
}

/// One full iteration: virtual step, Θ update, classifier update.
pub fn train_step(state: &mut TrainState, train: &Batch, meta: &Batch, cfg: &TrainConfig) -> Result<MetaGradientReport> {
    let alpha = cfg.alpha_at(state.iteration);
    let vstep = virtual_update(state, train, alpha, cfg)?;
    let report = meta_gradient_from(state, &vstep, meta, alpha, cfg, Exec::default())?;
    update_theta(state, &report.grad_theta, cfg.beta)?;
    // ∇L_j(w) does not depend on Θ, so the virtual step's gradients are reused.
    let raw = state.theta.weights(&vstep.losses)?;
    update_classifier_with(state, &vstep.grads, &raw, alpha, cfg)?;
    state.iteration += 1;
    Ok(report)
}

/// Source of per-sample weights during training.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    /// Learned weight net, updated every iteration.
    Learned,
    /// Fixed loss-to-weight function; Θ is never touched.
    Fixed(BaselineSpec),
}

impl Weighting {
    pub fn weights(&self, theta: &MWNet, losses: &[f64]) -> Result<Vec<f64>> {
        match self {
            Weighting::Learned => theta.weights(losses),
            Weighting::Fixed(b) => Ok(b.weights(losses)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Samples whose weights are traced each epoch (noisy ones preferred).
    pub tracked: usize,
    pub probe_steps: usize,
    pub weighting: Weighting,
    /// Results are bit-identical either way.
    pub exec: Exec,
    /// Recorded verbatim in the report.
    pub config_echo: serde_json::Value,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            tracked: 10,
            probe_steps: 200,
            weighting: Weighting::Learned,
            exec: Exec::default(),
            config_echo: serde_json::Value::Null,
        }
    }
}

fn tracked_indices(train: &BiasedDataset, count: usize, seed: u64) -> Vec<usize> {
    let noisy: Vec<usize> = (0..train.len()).filter(|&i| train.corrupted[i]).collect();
    let pool: Vec<usize> = if noisy.is_empty() { (0..train.len()).collect() } else { noisy };
    let take = count.min(pool.len());
    let mut rng = stream(seed, streams::TRACKING);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), take)
        .into_iter()
        .map(|j| pool[j])
        .collect();
    idx.sort_unstable();
    idx
}

/// Runs `cfg.iterations` iterations with fresh batches each time and
/// collects per-epoch metrics. An epoch is `⌈N/n⌉` iterations.
pub fn train(
    train_set: &BiasedDataset,
    meta_set: &BiasedDataset,
    test_set: &BiasedDataset,
    init: TrainState,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(TrainState, RunReport)> {
    cfg.validate()?;
    if meta_set.is_empty() {
        return Err(Error::Data("meta set is empty".into()));
    }
    if test_set.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    if cfg.n > train_set.len() || cfg.m > meta_set.len() {
        return Err(Error::Config(format!(
            "batch sizes n={} m={} exceed train ({}) or meta ({}) set",
            cfg.n,
            cfg.m,
            train_set.len(),
            meta_set.len()
        )));
    }
    let mut warnings = Vec::new();
    if meta_set.len() > train_set.len() {
        warnings.push(format!(
            "meta set ({}) larger than training set ({})",
            meta_set.len(),
            train_set.len()
        ));
    }

    let mut state = init;
    let mut train_rng = stream(cfg.seed, streams::TRAIN_BATCHES);
    let mut meta_rng = stream(cfg.seed, streams::META_BATCHES);
    let per_epoch = train_set.len().div_ceil(cfg.n);
    let tracked = tracked_indices(train_set, opts.tracked, cfg.seed);
    let tracked_batch = train_set.batch(&tracked);
    let snapshot = |s: &TrainState| -> Result<Vec<f64>> {
        opts.weighting.weights(&s.theta, &batch_losses(&s.w, &tracked_batch)?)
    };
    let mut snapshots = vec![snapshot(&state)?];
    let mut epochs = Vec::new();
    let (mut sum_train, mut sum_meta, mut sum_norm, mut count) = (0.0, 0.0, 0.0, 0usize);

    for t in 0..cfg.iterations {
        let train_batch = train_set.batch(&sample_batch(train_set.len(), cfg.n, &mut train_rng)?);
        let meta_batch = meta_set.batch(&sample_batch(meta_set.len(), cfg.m, &mut meta_rng)?);
        match &opts.weighting {
            Weighting::Learned => {
                let alpha = cfg.alpha_at(state.iteration);
                let vstep = virtual_update_with(&state, &train_batch, alpha, cfg, opts.exec)?;
                let report = meta_gradient_from(&state, &vstep, &meta_batch, alpha, cfg, opts.exec)?;
                update_theta(&mut state, &report.grad_theta, cfg.beta)?;
                let raw = state.theta.weights(&vstep.losses)?;
                update_classifier_with(&mut state, &vstep.grads, &raw, alpha, cfg)?;
                state.iteration += 1;
                sum_train += vstep.losses.iter().sum::<f64>() / vstep.losses.len() as f64;
                sum_meta += report.meta_loss;
                sum_norm += norm(&report.grad_theta);
            }
            Weighting::Fixed(spec) => {
                let alpha = cfg.alpha_at(state.iteration);
                let (losses, grads) = batch_gradients(&state.w, &train_batch, opts.exec)?;
                let raw = spec.weights(&losses);
                let meta_losses = batch_losses(&state.w, &meta_batch)?;
                update_classifier_with(&mut state, &grads, &raw, alpha, cfg)?;
                state.iteration += 1;
                sum_train += losses.iter().sum::<f64>() / losses.len() as f64;
                sum_meta += meta_losses.iter().sum::<f64>() / meta_losses.len() as f64;
            }
        }
        count += 1;
        if (t + 1) % per_epoch == 0 || t + 1 == cfg.iterations {
            let (acc, _) = harness::evaluate(&state.w, test_set)?;
            epochs.push(EpochMetrics {
                epoch: epochs.len() + 1,
                train_loss: sum_train / count as f64,
                meta_loss: sum_meta / count as f64,
                test_accuracy: acc,
                meta_grad_norm: sum_norm / count as f64,
            });
            snapshots.push(snapshot(&state)?);
            (sum_train, sum_meta, sum_norm, count) = (0.0, 0.0, 0.0, 0);
        }
    }

    let (_, confusion) = harness::evaluate(&state.w, test_set)?;
    let final_losses = batch_losses(&state.w, &train_set.all())?;
    let weight_dist = harness::weight_records(&opts.weighting.weights(&state.theta, &final_losses)?, train_set);
    let hi = harness::percentile(&final_losses, 0.99);
    let weight_curve = harness::probe_weighting(&opts.weighting, &state.theta, 0.0, hi, opts.probe_steps)?;
    let stability = harness::stability_trace(&snapshots)?;
    let report = RunReport {
        epochs,
        confusion,
        weight_curve,
        weight_dist,
        stability,
        config_echo: opts.config_echo.clone(),
        warnings,
    };
    Ok((state, report))
}
