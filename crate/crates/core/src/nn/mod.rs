//! Dense feed-forward networks: forward pass, backprop from an externally
//! supplied output gradient, losses and SGD.
//!
//! Backprop starting from an arbitrary output gradient is what lets a party
//! train its generator from gradient terms computed by its partner, and lets
//! the collaborator hand first-layer errors back to the parties.

mod layer;
mod loss;
mod mlp;
mod optim;
mod tensor;

pub use layer::{softmax_in_place, Activation, DenseLayer};
pub use loss::{loss_eval, one_hot, LossKind};
pub use mlp::{ForwardCache, Gradients, LayerGradient, Mlp};
pub use optim::{gradient_norm, Optimizer, Sgd};
pub use tensor::Tensor2;

pub(crate) use tensor::dot;

/// Hidden width `⌈(n_in + n_out)/2⌉` used for dual and central networks.
pub fn hidden_width(n_in: usize, n_out: usize) -> usize {
    (n_in + n_out).div_ceil(2)
}

/// Standard dual generator: one ReLU hidden layer, identity output.
pub fn dual_network<R: rand::Rng + ?Sized>(
    n_in: usize,
    n_out: usize,
    rng: &mut R,
) -> crate::Result<Mlp> {
    Mlp::init(
        &[n_in, hidden_width(n_in, n_out), n_out],
        &[Activation::Relu, Activation::Identity],
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn hidden_width_rounds_up() {
        assert_eq!(hidden_width(15, 15), 15);
        assert_eq!(hidden_width(15, 16), 16);
        assert_eq!(hidden_width(30, 2), 16);
        assert_eq!(hidden_width(504, 280), 392);
    }

    #[test]
    fn identity_and_relu_layers() {
        let id = Mlp::new(vec![DenseLayer::new(Tensor2::identity(2), vec![0.0; 2], Activation::Identity).unwrap()])
            .unwrap();
        let x = Tensor2::new(1, 2, vec![-1.0, 2.0]).unwrap();
        assert_eq!(id.predict(&x).unwrap(), x);
        let relu = Mlp::new(vec![DenseLayer::new(Tensor2::identity(2), vec![0.0; 2], Activation::Relu).unwrap()])
            .unwrap();
        assert_eq!(relu.predict(&x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_only_on_output() {
        let mut r = rng::seeded(0);
        assert!(Mlp::init(&[2, 3, 2], &[Activation::Softmax, Activation::Identity], &mut r).is_err());
        assert!(Mlp::init(&[2, 3, 2], &[Activation::Relu, Activation::Softmax], &mut r).is_ok());
    }

    #[test]
    fn layer_chain_is_checked() {
        let a = DenseLayer::zeroed(2, 3, Activation::Relu);
        let b = DenseLayer::zeroed(4, 1, Activation::Identity);
        assert!(matches!(Mlp::new(vec![a, b]), Err(crate::Error::Shape { .. })));
        assert!(Mlp::new(vec![]).is_err());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut r = rng::seeded(1);
        let m = dual_network(3, 2, &mut r).unwrap();
        assert!(m.forward(&Tensor2::zeros(4, 2)).is_err());
    }

    #[test]
    fn single_identity_layer_gradient_is_outer_product() {
        let w = Tensor2::new(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5]).unwrap();
        let m = Mlp::new(vec![DenseLayer::new(w, vec![0.1, -0.2], Activation::Identity).unwrap()]).unwrap();
        let x = Tensor2::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap();
        let g = Tensor2::new(2, 2, vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let (_, cache) = m.forward(&x).unwrap();
        let grads = m.backprop(&cache, &g).unwrap();
        assert_eq!(grads.layers[0].weights, g.transpose().matmul(&x).unwrap());
        assert_eq!(grads.layers[0].bias, vec![0.3 + 1.1, -0.7 + 0.2]);
    }

    #[test]
    fn zero_out_grad_gives_zero_gradients() {
        let mut r = rng::seeded(2);
        let m = Mlp::init(&[4, 5, 3, 2], &[Activation::Relu, Activation::Sigmoid, Activation::Identity], &mut r)
            .unwrap();
        let x = Tensor2::filled(3, 4, 0.3);
        let (_, cache) = m.forward(&x).unwrap();
        let grads = m.backprop(&cache, &Tensor2::zeros(3, 2)).unwrap();
        for l in &grads.layers {
            assert!(l.weights.data().iter().all(|&v| v == 0.0));
            assert!(l.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let layer = DenseLayer::new(Tensor2::filled(1, 1, 1.0), vec![0.0], Activation::Identity).unwrap();
        let mut m = Mlp::new(vec![layer]).unwrap();
        let g = Gradients {
            layers: vec![LayerGradient {
                weights: Tensor2::filled(1, 1, 2.0),
                bias: vec![0.0],
            }],
            input: Tensor2::zeros(1, 1),
        };
        let before = m.clone();
        m.sgd_step(&g, 0.0).unwrap();
        assert_eq!(m, before);
        m.sgd_step(&g, 0.1).unwrap();
        assert!((m.layers()[0].weights.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut m = Mlp::new(vec![DenseLayer::zeroed(1, 1, Activation::Identity)]).unwrap();
        let g = Gradients {
            layers: vec![LayerGradient {
                weights: Tensor2::from_raw(1, 1, vec![f64::NAN]),
                bias: vec![0.0],
            }],
            input: Tensor2::zeros(1, 1),
        };
        assert!(matches!(m.sgd_step(&g, 0.1), Err(crate::Error::NonFinite(_))));
    }
}
