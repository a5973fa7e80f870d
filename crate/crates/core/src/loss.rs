//! Per-sample differentiable losses on network outputs.

use crate::error::{ensure_shape, Error, Result};
use crate::matrix::Matrix;

pub trait SampleLoss {
    /// Loss of one output row against an integer label; writes ∂loss/∂output
    /// into `grad`.
    fn loss_and_grad(&self, output: &[f64], label: usize, grad: &mut [f64]) -> f64;

    /// Per-sample losses and the upstream gradient matrix for a batch.
    fn batch(&self, outputs: &Matrix, labels: &[usize]) -> Result<(Vec<f64>, Matrix)> {
        ensure_shape("loss labels", outputs.rows(), labels.len())?;
        let mut up = Matrix::zeros(outputs.rows(), outputs.cols());
        let mut losses = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y >= outputs.cols() {
                return Err(Error::Data(format!(
                    "label {y} out of range for {} outputs",
                    outputs.cols()
                )));
            }
            let l = self.loss_and_grad(outputs.row(i), y, up.row_mut(i));
            if !l.is_finite() {
                return Err(Error::NonFinite("per-sample loss"));
            }
            losses.push(l);
        }
        Ok((losses, up))
    }
}

/// Softmax cross-entropy on logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl SampleLoss for CrossEntropy {
    fn loss_and_grad(&self, logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (g, &z) in grad.iter_mut().zip(logits) {
            *g = (z - max).exp();
            sum += *g;
        }
        for g in grad.iter_mut() {
            *g /= sum;
        }
        let loss = sum.ln() - (logits[label] - max);
        grad[label] -= 1.0;
        loss
    }
}
