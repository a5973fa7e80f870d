//! Learned sample reweighting with a meta-trained weight net.
//!
//! A small MLP maps each training sample's loss to a weight in `[0, 1]`. It is
//! trained jointly with the classifier by online bilevel optimization: every
//! iteration takes a virtual weighted SGD step, differentiates the loss on a
//! small clean, class-balanced meta set through that step to update the
//! weight net, then takes the real classifier step with the new weights.
//!
//! Modules:
//!
//! - [`nnet`]: dense networks, per-sample gradients, finite-difference oracle, SGD.
//! - [`weightnet`]: the loss-to-weight network, batch normalization, curve probing.
//! - [`metaopt`]: the bilevel iteration and its analytic and numerical meta-gradients.
//! - [`biasgen`]: synthetic data, long-tail and label-noise injection, batching.
//! - [`harness`]: metrics, analyses, baselines, experiment driver and reports.
//! - [`config`]: strict JSON experiment configuration.
//! - [`gradcheck`]: analytic vs. finite-difference meta-gradient comparison.
//!
//! Batched gradient work fans out over rayon when the default `parallel`
//! feature is on. Results are bit-identical either way.

pub mod biasgen;
pub mod config;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod matrix;
pub mod metaopt;
pub mod nnet;
pub mod weightnet;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use exec::Exec;
pub use harness::{run_experiment, BaselineSpec, RunReport};
pub use matrix::Matrix;
pub use metaopt::{TrainConfig, TrainState};
pub use nnet::{DenseNet, LayerSpec};
pub use weightnet::MWNet;

/// Shortest round-trip text for a float, with an exponent for very large or
/// small magnitudes.
pub fn fmt_float(x: f64) -> String {
    format!("{x:?}")
}
