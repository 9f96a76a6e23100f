use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, DenseLayer, Tensor2};
use crate::error::{Error, Result};

/// Stack of dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Per-layer weighted inputs `z^l` and activations `a^l` of one batch.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Tensor2,
    pub z: Vec<Tensor2>,
    pub a: Vec<Tensor2>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor2 {
        self.a.last().expect("cache has at least one layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
}

/// Gradients for every layer plus the gradient with respect to the input
/// batch (needed when the input itself came from another actor).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    pub input: Tensor2,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp, batch: usize) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Tensor2::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            input: Tensor2::zeros(batch, model.input_width()),
        }
    }

    /// Elementwise sum; both must come from the same model.
    pub fn add(&self, other: &Gradients) -> Result<Gradients> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("Gradients::add", self.layers.len(), other.layers.len()));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                Ok(LayerGradient {
                    weights: a.weights.add(&b.weights)?,
                    bias: a.bias.iter().zip(&b.bias).map(|(x, y)| x + y).collect(),
                })
            })
            .collect::<Result<_>>()?;
        let input = if self.input.same_shape(&other.input) {
            self.input.add(&other.input)?
        } else {
            self.input.clone()
        };
        Ok(Gradients { layers, input })
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::shape(
                    "Mlp layer chain",
                    pair[0].output_width(),
                    pair[1].input_width(),
                ));
            }
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::InvalidArgument(
                "softmax is only permitted on the output layer".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// Randomly initialized network with the given widths
    /// (`widths[0]` is the input width) and per-layer activations.
    pub fn init<R: Rng + ?Sized>(
        widths: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() != activations.len() + 1 {
            return Err(Error::shape(
                "Mlp::init activations",
                widths.len().saturating_sub(1),
                activations.len(),
            ));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| DenseLayer::init(w[0], w[1], act, rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// All parameters flattened layer by layer (weights then bias).
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn forward(&self, batch: &Tensor2) -> Result<(Tensor2, ForwardCache)> {
        if batch.cols() != self.input_width() {
            return Err(Error::shape("mlp_forward input", self.input_width(), batch.cols()));
        }
        let mut z = Vec::with_capacity(self.layers.len());
        let mut a: Vec<Tensor2> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = a.last().unwrap_or(batch);
            let zl = layer.pre_activation(input)?;
            let al = layer.activation.apply(&zl);
            z.push(zl);
            a.push(al);
        }
        let output = a.last().cloned().expect("non-empty");
        Ok((
            output,
            ForwardCache {
                input: batch.clone(),
                z,
                a,
            },
        ))
    }

    /// Output only.
    pub fn predict(&self, batch: &Tensor2) -> Result<Tensor2> {
        Ok(self.forward(batch)?.0)
    }

    /// Backpropagation from an externally supplied gradient at the output.
    ///
    /// `out_grad` is `∂L/∂a^L` for every output activation except softmax,
    /// where it is taken as `∂L/∂z^L` (the `p − y` convention of
    /// [`super::loss_eval`]). Errors then follow
    /// `δ^l = σ'(z^l) ⊙ (δ^{l+1} · W^{l+1})` and parameter gradients are
    /// summed over the batch rows.
    pub fn backprop(&self, cache: &ForwardCache, out_grad: &Tensor2) -> Result<Gradients> {
        if cache.z.len() != self.layers.len() {
            return Err(Error::shape("backprop cache", self.layers.len(), cache.z.len()));
        }
        out_grad.ensure_shape(cache.output(), "backprop out_grad")?;

        let last = self.layers.len() - 1;
        let mut delta = match self.layers[last].activation {
            Activation::Softmax | Activation::Identity => out_grad.clone(),
            act => out_grad.zip_map(&cache.z[last], |g, z| g * act.derivative(z))?,
        };

        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { &cache.input } else { &cache.a[l - 1] };
            grads.push(LayerGradient {
                weights: delta.transpose_matmul(input)?,
                bias: delta.column_sums(),
            });
            // Error propagated to the layer input.
            let upstream = delta.matmul(&self.layers[l].weights)?;
            delta = if l == 0 {
                upstream
            } else {
                let act = self.layers[l - 1].activation;
                upstream.zip_map(&cache.z[l - 1], |g, z| g * act.derivative(z))?
            };
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: delta,
        })
    }

    /// `w ← w − lr·∂L/∂w` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape("sgd_step", self.layers.len(), grads.layers.len()));
        }
        for (layer, g) in self.layers.iter().zip(&grads.layers) {
            layer.weights.ensure_shape(&g.weights, "sgd_step weights")?;
            if g.bias.len() != layer.bias.len() {
                return Err(Error::shape("sgd_step bias", layer.bias.len(), g.bias.len()));
            }
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("sgd_step gradient"));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, dw) in layer.weights.data_mut().iter_mut().zip(g.weights.data()) {
                *w -= lr * dw;
            }
            for (b, db) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * db;
            }
        }
        Ok(())
    }
}
