//! Analytic-versus-numerical meta-gradient comparison over random instances.

use serde::{Deserialize, Serialize};

use crate::biasgen::{derive_seed, gen_gaussians, sample_batch, stream, streams, GaussianMixtureSpec};
use crate::error::{Error, Result};
use crate::matrix::{norm, relative_error};
use crate::metaopt::{meta_gradient_direct, meta_gradient_fd, TrainConfig, TrainState};
use crate::nnet::{chain, Activation, DenseNet};
use crate::weightnet::MWNet;

/// Largest weight net the checker accepts.
pub const MAX_THETA_PARAMS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSetup {
    /// Classifier widths, input first, e.g. `[2, 8, 3]`.
    pub classifier: Vec<usize>,
    pub weight_net_hidden: Vec<usize>,
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self {
            classifier: vec![2, 8, 3],
            weight_net_hidden: vec![5],
            n: 8,
            m: 4,
            alpha: 0.1,
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub seed: u64,
    pub normalize: bool,
    pub rel_error: f64,
    pub direct_norm: f64,
    pub fd_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub instances: Vec<InstanceResult>,
    pub tolerance: f64,
}

impl GradcheckOutcome {
    pub fn max_rel_error(&self) -> f64 {
        self.instances.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.instances.iter().all(|r| r.rel_error <= self.tolerance)
    }
}

/// Checks every seed in both unnormalized and normalized modes.
/// `negate_direct` flips the analytic gradient's sign to self-test the checker.
pub fn run(setup: &GradcheckSetup, seeds: &[u64], negate_direct: bool) -> Result<GradcheckOutcome> {
    let classes = *setup
        .classifier
        .last()
        .ok_or_else(|| Error::Config("classifier widths are empty".into()))?;
    if setup.classifier.len() < 2 || classes < 2 {
        return Err(Error::Config("classifier needs an input width and ≥ 2 outputs".into()));
    }
    let theta_params: usize = MWNet::specs(&setup.weight_net_hidden).iter().map(|s| s.param_count()).sum();
    if theta_params > MAX_THETA_PARAMS {
        return Err(Error::Config(format!(
            "gradient check needs a weight net with ≤ {MAX_THETA_PARAMS} parameters, got {theta_params}"
        )));
    }
    let dim = setup.classifier[0];
    let mut instances = Vec::new();
    for &seed in seeds {
        let per_class = (setup.n + setup.m).div_ceil(classes) + 1;
        let mut spec = GaussianMixtureSpec::on_circle(classes, 1.0, 1.0, per_class);
        spec.dim = dim;
        for m in &mut spec.means {
            m.resize(dim, 0.0);
        }
        let data = gen_gaussians(&spec, seed)?;
        let mut rng = stream(seed, streams::TRAIN_BATCHES);
        let idx = sample_batch(data.len(), setup.n + setup.m, &mut rng)?;
        let train = data.batch(&idx[..setup.n]);
        let meta = data.batch(&idx[setup.n..]);
        let w = DenseNet::init(
            &chain(&setup.classifier, Activation::ReLU, Activation::Identity),
            derive_seed(seed, streams::CLASSIFIER_INIT),
        )?;
        let theta = MWNet::random(&setup.weight_net_hidden, derive_seed(seed, streams::WEIGHTNET_INIT))?;
        let state = TrainState::new(w, theta);
        for normalize in [false, true] {
            let cfg = TrainConfig {
                normalize,
                ..TrainConfig::pure(setup.alpha, 1.0, setup.n, setup.m)
            };
            let mut direct = meta_gradient_direct(&state, &train, &meta, setup.alpha, &cfg)?.grad_theta;
            if negate_direct {
                direct.iter_mut().for_each(|g| *g = -*g);
            }
            let fd = meta_gradient_fd(&state, &train, &meta, setup.alpha, &cfg, setup.eps)?;
            instances.push(InstanceResult {
                seed,
                normalize,
                rel_error: relative_error(&direct, &fd),
                direct_norm: norm(&direct),
                fd_norm: norm(&fd),
            });
        }
    }
    Ok(GradcheckOutcome {
        instances,
        tolerance: setup.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_passes() {
        let out = run(&GradcheckSetup::default(), &[1, 2, 3], false).unwrap();
        assert!(out.passed(), "max err {}", out.max_rel_error());
        assert_eq!(out.instances.len(), 6);
    }

    #[test]
    fn corrupted_sign_fails() {
        let out = run(&GradcheckSetup::default(), &[1, 2], true).unwrap();
        assert!(!out.passed());
    }

    #[test]
    fn zero_alpha_trivially_passes() {
        let setup = GradcheckSetup { alpha: 0.0, ..GradcheckSetup::default() };
        let out = run(&setup, &[4, 5], false).unwrap();
        assert!(out.instances.iter().all(|r| r.direct_norm == 0.0 && r.fd_norm == 0.0));
        assert!(out.passed());
    }

    #[test]
    fn oversized_weight_net_rejected() {
        let setup = GradcheckSetup { weight_net_hidden: vec![100], ..GradcheckSetup::default() };
        assert!(matches!(run(&setup, &[1], false), Err(Error::Config(_))));
    }
}
