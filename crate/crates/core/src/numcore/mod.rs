//! Arrays, reverse-mode differentiation, and neural layer primitives.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{check_input, check_params, finite_difference_check, relative_error};
pub use graph::{AttentionShape, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use rng::{seeded_rng, RngState, RngStream};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `x[n×p]·W[p×q] + b[q]` on plain tensors.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = nn::linear(&mut g, x, w, b)?;
    Ok(g.value(y).clone())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, gn, b) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(x, gn, b, eps)?;
    Ok(g.value(y).clone())
}

/// Softmax of `logits / temperature` over the trailing axis.
pub fn softmax(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::param(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(graph::softmax_rows(logits, temperature))
}

/// Evaluate a scalar loss node and differentiate it.
pub fn forward_backward(graph: &Graph, loss: Var) -> Result<(f64, Gradients)> {
    let grads = graph.backward(loss)?;
    Ok((graph.value(loss).item(), grads))
}

#[cfg(test)]
mod tests;
