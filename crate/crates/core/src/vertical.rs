//! Split training of the central classifier.
//!
//! Each party owns a bias-free affine layer over its own columns and sends
//! the partial pre-activations `z_P = x_P W_Pᵀ` of the first hidden layer to
//! the collaborator C. C adds them, applies the hidden bias and ReLU, runs
//! the softmax head, and returns the first-hidden-layer error δ to both
//! parties. Because `z_A + z_B = [x_A | x_B] [W_A | W_B]ᵀ`, the split network
//! is the monolithic one with its first weight matrix cut by columns.
//!
//! All gradients carry the `1/batch` factor inside δ, so weight gradients
//! are plain sums over the batch rows.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Side;
use crate::dp::ReleasedFeatures;
use crate::error::{Error, Result};
use crate::nn::{hidden_width, loss_eval, one_hot, Activation, DenseLayer, Gradients, LossKind, Mlp, Tensor2};
use crate::rng::{self, streams};
use crate::transport::{Actor, Endpoint, MessageKind, Payload};

/// C's part of the network: the first hidden layer's bias and activation
/// plus the layers above it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentralModel {
    pub hidden_bias: Vec<f64>,
    pub hidden_activation: Activation,
    /// Upper layers ending in softmax.
    pub head: Mlp,
}

impl CentralModel {
    pub fn input_width(&self) -> usize {
        self.hidden_bias.len()
    }

    pub fn classes(&self) -> usize {
        self.head.output_width()
    }

    /// Class probabilities for summed pre-activations `z`.
    pub fn predict(&self, z: &Tensor2) -> Result<Tensor2> {
        self.head.predict(&self.hidden(z)?)
    }

    fn hidden(&self, z: &Tensor2) -> Result<Tensor2> {
        if z.cols() != self.input_width() {
            return Err(Error::shape("central input", self.input_width(), z.cols()));
        }
        let mut pre = z.clone();
        pre.add_row_vector(&self.hidden_bias);
        Ok(self.hidden_activation.apply(&pre))
    }
}

/// Local layers of both parties plus C's upper layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCentralModel {
    pub local_a: DenseLayer,
    pub local_b: DenseLayer,
    pub central: CentralModel,
}

impl SplitCentralModel {
    /// Hidden width `⌈(d_A + d_B + classes)/2⌉`. Each actor initialises its
    /// own part from its own sub-stream of `seed`.
    pub fn init(d_a: usize, d_b: usize, classes: usize, seed: u64) -> Result<Self> {
        if d_a == 0 || d_b == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "central model needs both widths ≥ 1 and ≥ 2 classes, got {d_a}, {d_b}, {classes}"
            )));
        }
        let h = hidden_width(d_a + d_b, classes);
        // Glorot bound of the full first layer, so the split model starts
        // where a monolithic one over all columns would.
        let limit = (6.0 / (d_a + d_b + h) as f64).sqrt();
        let init_local = |d: usize, index: u64| {
            let mut r = rng::indexed_stream(seed, streams::CENTRAL_INIT, index);
            let w = (0..d * h).map(|_| r.gen_range(-limit..=limit)).collect();
            DenseLayer::new(Tensor2::new(h, d, w)?, vec![0.0; h], Activation::Identity)
        };
        let local_a = init_local(d_a, 0)?;
        let local_b = init_local(d_b, 1)?;
        let mut r = rng::indexed_stream(seed, streams::CENTRAL_INIT, 2);
        let head = Mlp::init(&[h, classes], &[Activation::Softmax], &mut r)?;
        Ok(Self {
            local_a,
            local_b,
            central: CentralModel {
                hidden_bias: vec![0.0; h],
                hidden_activation: Activation::Relu,
                head,
            },
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.central.input_width()
    }

    /// The equivalent network on `[x_A | x_B]`.
    pub fn to_monolithic(&self) -> Result<Mlp> {
        let wa = &self.local_a.weights;
        let wb = &self.local_b.weights;
        let first = DenseLayer::new(wa.hstack(wb)?, self.central.hidden_bias.clone(), self.central.hidden_activation)?;
        let mut layers = vec![first];
        layers.extend(self.central.head.layers().iter().cloned());
        Mlp::new(layers)
    }

    /// Class probabilities given both parties' released rows.
    pub fn predict(&self, x_a: &Tensor2, x_b: &Tensor2) -> Result<Tensor2> {
        let z = party_forward(&self.local_a, x_a)?.add(&party_forward(&self.local_b, x_b)?)?;
        self.central.predict(&z)
    }
}

/// A party's additive contribution `x Wᵀ` to every first-hidden-layer
/// pre-activation.
pub fn party_forward(local: &DenseLayer, x: &Tensor2) -> Result<Tensor2> {
    if x.cols() != local.input_width() {
        return Err(Error::shape("party_forward", local.input_width(), x.cols()));
    }
    x.matmul_transposed(&local.weights)
}

/// Result of one central step.
#[derive(Clone, Debug)]
pub struct CentralStep {
    pub loss: f64,
    pub head_grads: Gradients,
    pub bias_grad: Vec<f64>,
    /// First-hidden-layer error, identical for both parties.
    pub delta: Tensor2,
}

/// Forward from the summed partial sums through softmax and cross-entropy,
/// then backward to the first hidden layer:
/// `δ_j = σ'(z_j) Σ_k w_kj δ_k`.
pub fn central_forward_backward(
    central: &CentralModel,
    z_a: &Tensor2,
    z_b: &Tensor2,
    labels: &[usize],
) -> Result<CentralStep> {
    z_a.ensure_shape(z_b, "central partial sums")?;
    if labels.len() != z_a.rows() {
        return Err(Error::shape("central labels", z_a.rows(), labels.len()));
    }
    if z_a.rows() == 0 {
        return Err(Error::InvalidArgument("empty central batch".into()));
    }
    let mut pre = z_a.add(z_b)?;
    pre.add_row_vector(&central.hidden_bias);
    let hidden = central.hidden_activation.apply(&pre);
    let (probs, cache) = central.head.forward(&hidden)?;
    let target = one_hot(labels, central.classes())?;
    let (loss, out_grad) = loss_eval(LossKind::CrossEntropy, &probs, &target)?;
    let head_grads = central.head.backprop(&cache, &out_grad)?;
    let act = central.hidden_activation;
    let delta = head_grads.input.zip_map(&pre, |g, z| g * act.derivative(z))?;
    Ok(CentralStep {
        loss,
        bias_grad: delta.column_sums(),
        head_grads,
        delta,
    })
}

/// `W ← W − lr·δᵀx`. A party's update depends only on δ and its own rows.
pub fn party_backward(local: &mut DenseLayer, delta: &Tensor2, x: &Tensor2, lr: f64) -> Result<()> {
    if delta.rows() != x.rows() {
        return Err(Error::shape("party_backward rows", x.rows(), delta.rows()));
    }
    if delta.cols() != local.output_width() || x.cols() != local.input_width() {
        return Err(Error::shape(
            "party_backward",
            format!("δ {}×{}, x ·×{}", x.rows(), local.output_width(), local.input_width()),
            format!("δ {}×{}, x ·×{}", delta.rows(), delta.cols(), x.cols()),
        ));
    }
    let grad = delta.transpose_matmul(x)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("local layer gradient"));
    }
    for (w, g) in local.weights.data_mut().iter_mut().zip(grad.data()) {
        *w -= lr * g;
    }
    Ok(())
}

/// Argmax accuracy of the split model.
pub fn evaluate(model: &SplitCentralModel, x_a: &Tensor2, x_b: &Tensor2, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty batch".into()));
    }
    let probs = model.predict(x_a, x_b)?;
    if probs.rows() != labels.len() {
        return Err(Error::shape("evaluate labels", probs.rows(), labels.len()));
    }
    Ok(accuracy(&probs.argmax_rows(), labels))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Released rows a party feeds into its local layer, keyed by id: its own
/// perturbed rows, possibly extended with rows inferred by the partner's
/// dual model.
#[derive(Clone, Debug, Default)]
pub struct FeatureStore {
    index: HashMap<u64, usize>,
    rows: Option<ReleasedFeatures>,
}

impl FeatureStore {
    pub fn new(ids: &[u64], rows: ReleasedFeatures) -> Result<Self> {
        let mut store = Self::default();
        store.extend(ids, rows)?;
        Ok(store)
    }

    pub fn extend(&mut self, ids: &[u64], rows: ReleasedFeatures) -> Result<()> {
        if ids.len() != rows.rows() {
            return Err(Error::shape("FeatureStore rows", ids.len(), rows.rows()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(id) = ids.iter().find(|id| self.index.contains_key(id) || !seen.insert(**id)) {
            return Err(Error::Data(format!("id {id} already present in the feature store")));
        }
        let offset = self.len();
        self.index.extend(ids.iter().enumerate().map(|(i, &id)| (id, offset + i)));
        self.rows = Some(match self.rows.take() {
            None => rows,
            Some(old) => old.vstack(&rows)?,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn width(&self) -> usize {
        self.rows.as_ref().map_or(0, ReleasedFeatures::cols)
    }

    pub fn rows_for(&self, ids: &[u64]) -> Result<Tensor2> {
        let idx = ids
            .iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("id {id} has no released row at this party")))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = self
            .rows
            .as_ref()
            .ok_or_else(|| Error::Data("feature store is empty".into()))?;
        Ok(rows.as_tensor().select_rows(&idx))
    }
}

/// A data owner's side of split training.
#[derive(Debug)]
pub struct LocalParty {
    side: Side,
    layer: DenseLayer,
    store: FeatureStore,
    lr: f64,
    pending: Option<(u64, Tensor2)>,
}

impl LocalParty {
    pub fn new(side: Side, layer: DenseLayer, store: FeatureStore, lr: f64) -> Result<Self> {
        if store.width() != layer.input_width() {
            return Err(Error::shape("LocalParty features", layer.input_width(), store.width()));
        }
        Ok(Self {
            side,
            layer,
            store,
            lr,
            pending: None,
        })
    }

    pub fn layer(&self) -> &DenseLayer {
        &self.layer
    }

    pub fn store(&self) -> &FeatureStore {
        &self.store
    }

    /// Sends the partial sums for `ids`.
    pub fn forward(&mut self, ids: &[u64], tag: u64, net: &mut Endpoint) -> Result<()> {
        let x = self.store.rows_for(ids)?;
        let z = party_forward(&self.layer, &x)?;
        net.send(Actor::C, MessageKind::PartialSum, Some(tag), Payload::Matrix(z))?;
        self.pending = Some((tag, x));
        Ok(())
    }

    /// Applies the δ returned for the pending batch.
    pub fn backward(&mut self, net: &mut Endpoint) -> Result<()> {
        let msg = net.expect(Actor::C, MessageKind::DeltaError)?;
        let (tag, x) = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol(format!("party {:?} got δ with no pending batch", self.side)))?;
        if msg.batch_tag != Some(tag) {
            return Err(Error::Protocol(format!(
                "stale δ: batch tag {:?}, pending {tag}",
                msg.batch_tag
            )));
        }
        party_backward(&mut self.layer, &msg.into_matrix()?, &x, self.lr)
    }

    /// Sends partial sums for evaluation; no δ follows.
    pub fn forward_eval(&self, ids: &[u64], tag: u64, net: &mut Endpoint) -> Result<()> {
        self.forward_rows(&self.store.rows_for(ids)?, tag, net)
    }

    /// Evaluation partial sums for rows assembled by the caller.
    pub fn forward_rows(&self, x: &Tensor2, tag: u64, net: &mut Endpoint) -> Result<()> {
        let z = party_forward(&self.layer, x)?;
        net.send(Actor::C, MessageKind::PartialSum, Some(tag), Payload::Matrix(z))?;
        Ok(())
    }
}

/// The collaborator's side of split training.
#[derive(Debug)]
pub struct Collaborator {
    central: CentralModel,
    labels: HashMap<u64, usize>,
    lr: f64,
}

impl Collaborator {
    pub fn new(central: CentralModel, lr: f64) -> Self {
        Self {
            central,
            labels: HashMap::new(),
            lr,
        }
    }

    pub fn central(&self) -> &CentralModel {
        &self.central
    }

    /// A second model at C sharing the labels already received.
    pub fn with_model(&self, central: CentralModel) -> Self {
        Self {
            central,
            labels: self.labels.clone(),
            lr: self.lr,
        }
    }

    /// Receives `(ids, labels)` for the training rows from B.
    pub fn receive_labels(&mut self, net: &mut Endpoint) -> Result<()> {
        let ids = net.expect(Actor::B, MessageKind::Control)?.into_ids()?;
        let labels = net.expect(Actor::B, MessageKind::Control)?.into_labels()?;
        if ids.len() != labels.len() {
            return Err(Error::shape("label transfer", ids.len(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.central.classes()) {
            return Err(Error::Data(format!("label {bad} outside {} classes", self.central.classes())));
        }
        self.labels.extend(ids.into_iter().zip(labels));
        Ok(())
    }

    fn partial_sums(&self, tag: u64, net: &mut Endpoint) -> Result<(Tensor2, Tensor2)> {
        let mut take = |from| -> Result<Tensor2> {
            let msg = net.expect(from, MessageKind::PartialSum)?;
            if msg.batch_tag != Some(tag) {
                return Err(Error::Protocol(format!(
                    "partial sum from {from} for batch {:?}, expected {tag}",
                    msg.batch_tag
                )));
            }
            msg.into_matrix()
        };
        let z_a = take(Actor::A)?;
        let z_b = take(Actor::B)?;
        Ok((z_a, z_b))
    }

    /// Aggregates, updates the upper layers and returns δ to both parties.
    pub fn step(&mut self, ids: &[u64], tag: u64, net: &mut Endpoint) -> Result<f64> {
        let (z_a, z_b) = self.partial_sums(tag, net)?;
        let labels = ids
            .iter()
            .map(|id| {
                self.labels
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("no label for id {id} at C")))
            })
            .collect::<Result<Vec<_>>>()?;
        let step = central_forward_backward(&self.central, &z_a, &z_b, &labels)?;
        if !step.head_grads.is_finite() || !step.delta.is_finite() {
            return Err(Error::NonFinite("central gradient"));
        }
        self.central.head.sgd_step(&step.head_grads, self.lr)?;
        for (b, g) in self.central.hidden_bias.iter_mut().zip(&step.bias_grad) {
            *b -= self.lr * g;
        }
        net.send(Actor::A, MessageKind::DeltaError, Some(tag), Payload::Matrix(step.delta.clone()))?;
        net.send(Actor::B, MessageKind::DeltaError, Some(tag), Payload::Matrix(step.delta))?;
        Ok(step.loss)
    }

    /// Predicted classes for an evaluation batch, sent to `to`.
    pub fn predict(&self, tag: u64, to: Actor, net: &mut Endpoint) -> Result<()> {
        let (z_a, z_b) = self.partial_sums(tag, net)?;
        let predicted = self.central.predict(&z_a.add(&z_b)?)?.argmax_rows();
        net.send(to, MessageKind::Control, Some(tag), Payload::Labels(predicted))?;
        Ok(())
    }
}

/// The three actors of split training with their transport endpoints.
pub struct SplitSession<'a> {
    pub a: &'a mut LocalParty,
    pub b: &'a mut LocalParty,
    pub c: &'a mut Collaborator,
    pub net_a: &'a mut Endpoint,
    pub net_b: &'a mut Endpoint,
    pub net_c: &'a mut Endpoint,
}

impl SplitSession<'_> {
    /// B hands the training labels to C.
    pub fn transfer_labels(&mut self, ids: &[u64], labels: &[usize]) -> Result<()> {
        if ids.len() != labels.len() {
            return Err(Error::shape("transfer_labels", ids.len(), labels.len()));
        }
        self.net_b.send(Actor::C, MessageKind::Control, None, Payload::Ids(ids.to_vec()))?;
        self.net_b.send(Actor::C, MessageKind::Control, None, Payload::Labels(labels.to_vec()))?;
        self.c.receive_labels(self.net_c)
    }

    /// One minibatch. Returns C's loss.
    pub fn train_batch(&mut self, ids: &[u64], tag: u64) -> Result<f64> {
        self.a.forward(ids, tag, self.net_a)?;
        self.b.forward(ids, tag, self.net_b)?;
        let loss = self.c.step(ids, tag, self.net_c)?;
        self.a.backward(self.net_a)?;
        self.b.backward(self.net_b)?;
        Ok(loss)
    }

    /// `epochs` passes over `ids` in seeded order. Returns the mean loss of
    /// each epoch. `first_tag` keeps batch tags unique within a session.
    pub fn train(&mut self, ids: &[u64], epochs: usize, batch_size: usize, seed: u64, first_tag: u64) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("no rows to train the central model on".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
        }
        let mut tag = first_tag;
        let mut losses = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let order = epoch_order(ids, seed, epoch);
            let mut sum = 0.0;
            for batch in order.chunks(batch_size) {
                sum += self.train_batch(batch, tag)? * batch.len() as f64;
                tag += 1;
            }
            losses.push(sum / ids.len() as f64);
        }
        Ok(losses)
    }

    /// Predictions for `ids`, as received by B.
    pub fn predict(&mut self, ids: &[u64], tag: u64) -> Result<Vec<usize>> {
        self.a.forward_eval(ids, tag, self.net_a)?;
        self.b.forward_eval(ids, tag, self.net_b)?;
        self.c.predict(tag, Actor::B, self.net_c)?;
        let msg = self.net_b.expect(Actor::C, MessageKind::Control)?;
        if msg.batch_tag != Some(tag) {
            return Err(Error::Protocol("prediction for a different batch".into()));
        }
        msg.into_labels()
    }

    /// The current model, assembled for inspection.
    pub fn snapshot(&self) -> SplitCentralModel {
        SplitCentralModel {
            local_a: self.a.layer.clone(),
            local_b: self.b.layer.clone(),
            central: self.c.central.clone(),
        }
    }
}

/// Batch order of a central-training epoch; shared by all actors.
pub fn epoch_order(ids: &[u64], seed: u64, epoch: usize) -> Vec<u64> {
    let mut order = ids.to_vec();
    order.shuffle(&mut rng::indexed_stream(seed, streams::CENTRAL_BATCHES, epoch as u64));
    order
}

/// Monolithic reference: the same network trained on `[x_A | x_B]` with the
/// same batches. Used to check that splitting loses nothing.
#[allow(clippy::too_many_arguments)]
pub fn train_monolithic(
    model: &mut Mlp,
    ids: &[u64],
    x: &Tensor2,
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let row: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let classes = model.output_width();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = epoch_order(ids, seed, epoch);
        let mut sum = 0.0;
        for batch in order.chunks(batch_size) {
            let idx: Vec<usize> = batch.iter().map(|id| row[id]).collect();
            let xb = x.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (probs, cache) = model.forward(&xb)?;
            let (loss, grad) = loss_eval(LossKind::CrossEntropy, &probs, &one_hot(&yb, classes)?)?;
            let grads = model.backprop(&cache, &grad)?;
            model.sgd_step(&grads, lr)?;
            sum += loss * batch.len() as f64;
        }
        losses.push(sum / ids.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SplitCentralModel {
        SplitCentralModel::init(3, 2, 2, 11).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_partial_sums() {
        let layer = DenseLayer::zeroed(3, 4, Activation::Identity);
        let x = Tensor2::filled(5, 3, 0.7);
        assert_eq!(party_forward(&layer, &x).unwrap(), Tensor2::zeros(5, 4));
    }

    #[test]
    fn unit_weight_passes_feature_through() {
        let layer = DenseLayer::new(Tensor2::filled(1, 1, 1.0), vec![0.0], Activation::Identity).unwrap();
        let x = Tensor2::new(3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        assert_eq!(party_forward(&layer, &x).unwrap(), x);
    }

    #[test]
    fn untrained_loss_near_ln2() {
        let m = toy();
        let z = Tensor2::zeros(4, m.hidden_width());
        let step = central_forward_backward(&m.central, &z, &z, &[0, 1, 0, 1]).unwrap();
        assert!((step.loss - 2f64.ln()).abs() < 0.1);
    }

    #[test]
    fn zero_delta_is_no_update() {
        let mut layer = toy().local_a;
        let before = layer.clone();
        party_backward(&mut layer, &Tensor2::zeros(2, before.output_width()), &Tensor2::filled(2, 3, 0.5), 0.1).unwrap();
        assert_eq!(layer, before);
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let m = toy();
        let z = Tensor2::zeros(4, m.hidden_width());
        assert!(central_forward_backward(&m.central, &z, &z, &[0, 1]).is_err());
    }

    #[test]
    fn empty_evaluation_is_rejected() {
        let m = toy();
        assert!(evaluate(&m, &Tensor2::zeros(0, 3), &Tensor2::zeros(0, 2), &[]).is_err());
    }

    #[test]
    fn feature_store_rejects_duplicates() {
        let rows = ReleasedFeatures::from_inference(Tensor2::zeros(2, 1));
        let mut s = FeatureStore::new(&[1, 2], rows.clone()).unwrap();
        assert!(s.extend(&[2, 3], rows).is_err());
    }
}
