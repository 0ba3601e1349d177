//! Tensor-in, tensor-out wrappers around the graph primitives, for callers
//! that do not need gradients.

use crate::autograd::Graph;
use crate::error::Result;
use crate::tensor::Tensor;

/// Temperature softmax along the last axis.
pub fn softmax_temp(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(logits.clone());
    let axis = logits.rank().saturating_sub(1);
    let y = g.softmax(x, axis, tau)?;
    Ok(g.value(y).clone())
}

pub fn log_softmax_temp(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(logits.clone());
    let axis = logits.rank().saturating_sub(1);
    let y = g.log_softmax(x, axis, tau)?;
    Ok(g.value(y).clone())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (x, gain, bias) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(x, gain, bias)?;
    Ok(g.value(y).clone())
}

/// Mean negative log-likelihood over the positions whose target is not `pad_id`.
pub fn cross_entropy(log_probs: &Tensor, targets: &[usize], pad_id: usize) -> Result<f64> {
    let mut g = Graph::inference();
    let s = g.constant(log_probs.clone());
    let loss = g.cross_entropy(s, targets, Some(pad_id), 0.0)?;
    Ok(g.value(loss).item())
}
