use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
    /// Row-wise softmax. Output layers only.
    Softmax,
}

impl Activation {
    /// Applies the activation to a batch of pre-activations.
    pub fn apply(self, z: &Tensor2) -> Tensor2 {
        match self {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
            Activation::Sigmoid => z.map(sigmoid),
            Activation::Softmax => {
                let mut out = z.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                out
            }
        }
    }

    /// Elementwise `σ'(z)`. Not defined for softmax, whose Jacobian is
    /// folded into the loss gradient instead.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Softmax => panic!("softmax derivative is handled by the loss"),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Fully connected layer `a = σ(x·Wᵀ + b)` with `W` stored `(out × in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape("DenseLayer bias", weights.rows(), bias.len()));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("DenseLayer bias"));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Self {
            weights: Tensor2::from_raw(output, input, data),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn zeroed(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weights: Tensor2::zeros(output, input),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.rows()
    }

    /// Weighted input `z = x·Wᵀ + b`.
    pub fn pre_activation(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.input_width() {
            return Err(Error::shape("layer input", self.input_width(), x.cols()));
        }
        let mut z = x.matmul_transposed(&self.weights)?;
        z.add_row_vector(&self.bias);
        Ok(z)
    }
}
