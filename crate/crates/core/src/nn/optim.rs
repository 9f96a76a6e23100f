use super::{Gradients, Mlp};
use crate::error::Result;

/// Parameter update rule owned by one party.
pub trait Optimizer: Send {
    fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()>;
}

/// Minibatch SGD, optionally rescaling the gradient so its global L2 norm
/// over all parameters is at most `max_grad_norm`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            max_grad_norm: None,
        }
    }

    pub fn clipped(lr: f64, max_grad_norm: f64) -> Self {
        Self {
            lr,
            max_grad_norm: Some(max_grad_norm),
        }
    }
}

/// Global L2 norm over every weight and bias gradient.
pub fn gradient_norm(grads: &Gradients) -> f64 {
    grads
        .layers
        .iter()
        .flat_map(|l| l.weights.data().iter().chain(&l.bias))
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

impl Optimizer for Sgd {
    fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        let norm = gradient_norm(grads);
        match self.max_grad_norm {
            // Below the bound the plain step runs, bit for bit.
            Some(max) if norm > max => model.sgd_step(grads, self.lr * max / norm),
            _ => model.sgd_step(grads, self.lr),
        }
    }
}
