//! Privacy-preserving dual learning between parties A and B.
//!
//! A owns `f: X_A → X_B` and B owns `g: X_B → X_A`. Each is trained on
//! `ℓ_align + λ·ℓ_dual`, where
//! `ℓ_dual = mean_i (log P_A(x^A) − log P_A(x̂^A) + log P_B(x̂^B) − log P_B(x^B))²`.
//! Neither party may see the other's log-densities, so the cross terms of
//! the output-layer gradient travel under the owner's Paillier key and are
//! scaled homomorphically by the partner's density gradient.
//!
//! One minibatch is eight messages:
//!
//! | # | dir | kind | content |
//! |---|-----|------|---------|
//! | 1 | A→B | InferredBatch | `x̂^B = f(x^A)` |
//! | 2 | B→A | InferredBatch | `x̂^A = g(x^B)` |
//! | 3 | B→A | GradTerm | `∇ℓ_align(x̂^B) + λ_B·c·∇log P_B(x̂^B)·r_B / m` |
//! | 4 | B→A | CipherBlock | `[[r_B]]_B`, `r_B = log P_B(x̂^B) − log P_B(x^B)` |
//! | 5 | A→B | GradTerm | mirror of 3 |
//! | 6 | A→B | CipherBlock | `[[r_A]]_A` |
//! | 7 | A→B | CipherBlock | `[[r_B]]_B · (−λ_A·c·∇log P_A(x̂^A) / m)` |
//! | 8 | B→A | CipherBlock | `[[r_A]]_A · (−λ_B·c·∇log P_B(x̂^B) / m)` |
//!
//! then B decrypts 7, adds 5 and updates `g`; A decrypts 8, adds 3 and
//! updates `f`. `c` is 1 by default and 2 with `exact_duality_grad`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Side;
use crate::density::KdeModel;
use crate::dp::{PerturbedDataset, ReleasedFeatures};
use crate::error::{Error, Result};
use crate::he::{KeyPair, PublicKey, DEFAULT_SCALE_BITS};
use crate::nn::{loss_eval, ForwardCache, LossKind, Mlp, Optimizer, Sgd, Tensor2};
use crate::rng::{self, streams, Rng};
use crate::transport::{Actor, Endpoint, MessageKind, Payload};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Multiply the duality term by 2, the exact derivative of the square.
    pub exact_duality_grad: bool,
    /// `false` runs the plaintext shadow path: the log-density differences
    /// travel in the clear. Test use only.
    pub encryption: bool,
    pub scale_bits: u32,
    /// Global gradient-norm bound of both parties' SGD. `None` is plain SGD.
    pub max_grad_norm: Option<f64>,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            lambda_a: 0.01,
            lambda_b: 0.01,
            lr: 0.1,
            batch_size: 32,
            exact_duality_grad: false,
            encryption: true,
            scale_bits: DEFAULT_SCALE_BITS,
            max_grad_norm: Some(1.0),
        }
    }
}

impl DualConfig {
    /// The SGD both parties use by default.
    pub fn optimizer(&self) -> Box<dyn Optimizer> {
        Box::new(Sgd {
            lr: self.lr,
            max_grad_norm: self.max_grad_norm,
        })
    }

    fn factor(&self) -> f64 {
        if self.exact_duality_grad {
            2.0
        } else {
            1.0
        }
    }
}

/// The two generators after training.
#[derive(Clone, Debug, PartialEq)]
pub struct DualModelPair {
    pub theta_ab: Mlp,
    pub theta_ba: Mlp,
    pub lambda_a: f64,
    pub lambda_b: f64,
    /// Protocol rounds the pair went through; 0 means untrained.
    pub rounds: u64,
}

/// Forward pass of a generator.
pub fn dual_infer(model: &Mlp, x: &Tensor2) -> Result<Tensor2> {
    model.predict(x)
}

/// Inference on released features; the result may cross the boundary.
pub fn infer_released(model: &Mlp, x: &ReleasedFeatures) -> Result<ReleasedFeatures> {
    Ok(ReleasedFeatures::from_inference(model.predict(x.as_tensor())?))
}

/// The four per-sample log-densities entering `ℓ_dual`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTerms {
    pub logp_xa: Vec<f64>,
    pub logp_xhat_a: Vec<f64>,
    pub logp_xhat_b: Vec<f64>,
    pub logp_xb: Vec<f64>,
}

impl DualTerms {
    fn check(&self) -> Result<usize> {
        let m = self.logp_xa.len();
        for (name, v) in [
            ("logp_xhat_a", &self.logp_xhat_a),
            ("logp_xhat_b", &self.logp_xhat_b),
            ("logp_xb", &self.logp_xb),
        ] {
            if v.len() != m {
                return Err(Error::shape("DualTerms", m, format!("{} in {name}", v.len())));
            }
        }
        let all = self
            .logp_xa
            .iter()
            .chain(&self.logp_xhat_a)
            .chain(&self.logp_xhat_b)
            .chain(&self.logp_xb);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dual log-density terms"));
        }
        Ok(m)
    }

    /// Per-sample residual `log P(x^A) − log P(x̂^A) + log P(x̂^B) − log P(x^B)`.
    pub fn residuals(&self) -> Vec<f64> {
        (0..self.logp_xa.len())
            .map(|i| {
                self.logp_xa[i] - self.logp_xhat_a[i] + self.logp_xhat_b[i] - self.logp_xb[i]
            })
            .collect()
    }
}

/// `ℓ_dual`, averaged over the batch.
pub fn dual_loss(terms: &DualTerms) -> Result<f64> {
    let m = terms.check()?;
    if m == 0 {
        return Ok(0.0);
    }
    Ok(terms.residuals().iter().map(|r| r * r).sum::<f64>() / m as f64)
}

/// Output-layer gradient of `ℓ_align + λ·ℓ_dual` with respect to `x̂^B`:
/// `align_grad + λ·c/m·∇log P(x̂^B)·[(log P(x̂^B) − log P(x^B)) + (log P(x^A) − log P(x̂^A))]`
/// with `c = 2` when `exact` is set and 1 otherwise.
pub fn dual_output_grad(
    grad_logp_xhat_b: &Tensor2,
    terms: &DualTerms,
    align_grad: &Tensor2,
    lambda: f64,
    exact: bool,
) -> Result<Tensor2> {
    let m = terms.check()?;
    grad_logp_xhat_b.ensure_shape(align_grad, "dual_output_grad")?;
    if grad_logp_xhat_b.rows() != m {
        return Err(Error::shape("dual_output_grad rows", m, grad_logp_xhat_b.rows()));
    }
    let c = if exact { 2.0 } else { 1.0 };
    let res = terms.residuals();
    let mut out = align_grad.clone();
    for (i, r) in res.iter().enumerate().take(m) {
        let coef = lambda * c * r / m as f64;
        for (o, g) in out.row_mut(i).iter_mut().zip(grad_logp_xhat_b.row(i)) {
            *o += coef * g;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Idle,
    Inferred,
    TermsSent,
    CrossSent,
}

struct RoundState {
    tag: u64,
    own_x: Tensor2,
    cache: ForwardCache,
    /// `−λ·c·∇log P_own(x̂_own)/m`, the multiplier for the partner's residual.
    cross_multiplier: Option<Tensor2>,
    partner_grad: Option<Tensor2>,
    align_loss: Option<f64>,
}

/// One party's side of dual training.
pub struct DualParty {
    side: Side,
    model: Mlp,
    data: Arc<PerturbedDataset>,
    kde: KdeModel,
    keys: KeyPair,
    partner_key: Option<PublicKey>,
    optimizer: Box<dyn Optimizer>,
    lambda: f64,
    factor: f64,
    encryption: bool,
    scale_bits: u32,
    rng: Rng,
    stage: Stage,
    round: Option<RoundState>,
}

impl std::fmt::Debug for DualParty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualParty")
            .field("side", &self.side)
            .field("stage", &self.stage)
            .finish_non_exhaustive()
    }
}

fn partner(side: Side) -> Actor {
    match side {
        Side::A => Actor::B,
        Side::B => Actor::A,
    }
}

impl DualParty {
    /// `model` maps this party's features to the partner's; `kde` is fitted
    /// on this party's perturbed training partition.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        side: Side,
        model: Mlp,
        data: Arc<PerturbedDataset>,
        kde: KdeModel,
        keys: KeyPair,
        optimizer: Box<dyn Optimizer>,
        config: &DualConfig,
        seed: u64,
    ) -> Result<Self> {
        if model.input_width() != data.width() {
            return Err(Error::shape("DualParty model input", data.width(), model.input_width()));
        }
        if kde.dim() != data.width() {
            return Err(Error::shape("DualParty KDE", data.width(), kde.dim()));
        }
        let (lambda, tag) = match side {
            Side::A => (config.lambda_a, streams::ENCRYPT_A),
            Side::B => (config.lambda_b, streams::ENCRYPT_B),
        };
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("λ must be ≥ 0, got {lambda}")));
        }
        Ok(Self {
            side,
            model,
            data,
            kde,
            keys,
            partner_key: None,
            optimizer,
            lambda,
            factor: config.factor(),
            encryption: config.encryption,
            scale_bits: config.scale_bits,
            rng: rng::stream(seed, tag),
            stage: Stage::Idle,
            round: None,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn into_model(self) -> Mlp {
        self.model
    }

    pub fn data(&self) -> &Arc<PerturbedDataset> {
        &self.data
    }

    pub fn kde(&self) -> &KdeModel {
        &self.kde
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn set_encryption(&mut self, on: bool) {
        self.encryption = on;
    }

    fn expect_stage(&self, want: Stage, step: &str) -> Result<()> {
        if self.stage != want {
            return Err(Error::Protocol(format!(
                "party {:?} cannot {step} in stage {:?}",
                self.side, self.stage
            )));
        }
        Ok(())
    }

    fn check_tag(&self, got: Option<u64>) -> Result<()> {
        let want = self.round.as_ref().map(|r| r.tag);
        if got != want {
            return Err(Error::Protocol(format!(
                "batch tag {got:?} does not match the current round {want:?}"
            )));
        }
        Ok(())
    }

    /// Sends this party's public key.
    pub fn send_key(&self, net: &mut Endpoint) -> Result<()> {
        net.send(
            partner(self.side),
            MessageKind::Control,
            None,
            Payload::BigInts(vec![self.keys.public.n().clone()]),
        )?;
        Ok(())
    }

    pub fn receive_key(&mut self, net: &mut Endpoint) -> Result<()> {
        let [n]: [_; 1] = net
            .expect(partner(self.side), MessageKind::Control)?
            .into_bigints()?
            .try_into()
            .map_err(|_| Error::Protocol("key message must hold exactly n".into()))?;
        self.partner_key = Some(PublicKey::from_modulus(n));
        Ok(())
    }

    /// Step 1/2: infer the partner-side batch and send it.
    pub fn step_infer(&mut self, ids: &[u64], tag: u64, net: &mut Endpoint) -> Result<()> {
        self.expect_stage(Stage::Idle, "start a round")?;
        let x = self.data.released_rows(ids)?;
        let (out, cache) = self.model.forward(x.as_tensor())?;
        let inferred = ReleasedFeatures::from_inference(out);
        net.send(
            partner(self.side),
            MessageKind::InferredBatch,
            Some(tag),
            Payload::Matrix(inferred.into_tensor()),
        )?;
        self.round = Some(RoundState {
            tag,
            own_x: x.into_tensor(),
            cache,
            cross_multiplier: None,
            partner_grad: None,
            align_loss: None,
        });
        self.stage = Stage::Inferred;
        Ok(())
    }

    /// Steps 3–4 (B) and 5–6 (A): plaintext gradient term and the encrypted
    /// own residual for the partner's model.
    pub fn step_local_terms(&mut self, net: &mut Endpoint) -> Result<()> {
        self.expect_stage(Stage::Inferred, "compute local terms")?;
        let msg = net.expect(partner(self.side), MessageKind::InferredBatch)?;
        self.check_tag(msg.batch_tag)?;
        let tag = msg.batch_tag;
        let xhat = msg.into_matrix()?;
        let state = self.round.as_mut().expect("round state in stage Inferred");
        xhat.ensure_shape(&state.own_x, "inferred batch")?;
        let m = xhat.rows() as f64;

        let logp_hat = self.kde.log_density_rows(&xhat)?;
        let logp_own = self.kde.log_density_rows(&state.own_x)?;
        let grad_hat = self.kde.grad_log_density_rows(&xhat)?;
        let residual: Vec<f64> = logp_hat.iter().zip(&logp_own).map(|(h, o)| h - o).collect();
        let (align_loss, align_grad) = loss_eval(LossKind::Mse, &xhat, &state.own_x)?;

        let mut grad_term = align_grad;
        let mut multiplier = Tensor2::zeros(xhat.rows(), xhat.cols());
        for (i, r) in residual.iter().enumerate().take(xhat.rows()) {
            let coef = self.lambda * self.factor * r / m;
            let cross = -self.lambda * self.factor / m;
            for j in 0..xhat.cols() {
                let g = grad_hat.get(i, j);
                grad_term.set(i, j, grad_term.get(i, j) + coef * g);
                multiplier.set(i, j, cross * g);
            }
        }
        if !grad_term.is_finite() || !multiplier.is_finite() {
            return Err(Error::NonFinite("dual gradient term"));
        }
        state.cross_multiplier = Some(multiplier);
        state.align_loss = Some(align_loss);

        let to = partner(self.side);
        net.send(to, MessageKind::GradTerm, tag, Payload::Matrix(grad_term))?;
        if self.encryption {
            let enc = self
                .keys
                .public
                .encrypt_vector(&residual, self.scale_bits, &mut self.rng)?;
            net.send(to, MessageKind::CipherBlock, tag, Payload::Ciphers(enc))?;
        } else {
            let plain = Tensor2::new(residual.len(), 1, residual)?;
            net.send(to, MessageKind::MatrixBlock, tag, Payload::Matrix(plain))?;
        }
        self.stage = Stage::TermsSent;
        Ok(())
    }

    /// Steps 7 (A) and 8 (B): scale the partner's encrypted residual by this
    /// party's density gradient and return it under the partner's key.
    pub fn step_cross(&mut self, net: &mut Endpoint) -> Result<()> {
        self.expect_stage(Stage::TermsSent, "compute the cross term")?;
        let from = partner(self.side);
        let grad_msg = net.expect(from, MessageKind::GradTerm)?;
        self.check_tag(grad_msg.batch_tag)?;
        let tag = grad_msg.batch_tag;
        let partner_grad = grad_msg.into_matrix()?;
        let state = self.round.as_mut().expect("round state in stage TermsSent");
        partner_grad.ensure_shape(state.cache.output(), "partner gradient term")?;
        let multiplier = state
            .cross_multiplier
            .as_ref()
            .expect("multiplier computed with local terms");

        let payload = if self.encryption {
            let msg = net.expect(from, MessageKind::CipherBlock)?;
            if msg.batch_tag != tag {
                return Err(Error::Protocol("cipher block from a different round".into()));
            }
            let residual = msg.into_ciphers()?;
            let pk = self
                .partner_key
                .as_ref()
                .ok_or_else(|| Error::Protocol("partner key not received".into()))?;
            Payload::Ciphers(residual.outer_mul_plain(pk, multiplier, self.scale_bits)?)
        } else {
            let msg = net.expect(from, MessageKind::MatrixBlock)?;
            if msg.batch_tag != tag {
                return Err(Error::Protocol("residual block from a different round".into()));
            }
            let residual = msg.into_matrix()?;
            if residual.rows() != multiplier.rows() || residual.cols() != 1 {
                return Err(Error::shape(
                    "plaintext residual",
                    format!("{}×1", multiplier.rows()),
                    format!("{}×{}", residual.rows(), residual.cols()),
                ));
            }
            let mut prod = multiplier.clone();
            for i in 0..prod.rows() {
                let r = residual.get(i, 0);
                for v in prod.row_mut(i) {
                    *v *= r;
                }
            }
            Payload::Matrix(prod)
        };
        let kind = if self.encryption {
            MessageKind::CipherBlock
        } else {
            MessageKind::MatrixBlock
        };
        net.send(from, kind, tag, payload)?;
        state.partner_grad = Some(partner_grad);
        self.stage = Stage::CrossSent;
        Ok(())
    }

    /// Final step: decrypt the cross term, add the partner's plaintext term,
    /// backpropagate and update. Returns the partner-side alignment loss this
    /// party observed for its own data.
    pub fn step_update(&mut self, net: &mut Endpoint) -> Result<f64> {
        self.expect_stage(Stage::CrossSent, "update")?;
        let from = partner(self.side);
        let cross = if self.encryption {
            let msg = net.expect(from, MessageKind::CipherBlock)?;
            self.check_tag(msg.batch_tag)?;
            let block = msg.into_ciphers()?;
            if block.key != self.keys.id() {
                return Err(Error::Protocol(format!(
                    "cross term under key {}, expected own key {}",
                    block.key,
                    self.keys.id()
                )));
            }
            let state = self.round.as_ref().expect("round state");
            let out = state.cache.output();
            Tensor2::new(out.rows(), out.cols(), self.keys.decrypt_vector(&block)?)?
        } else {
            let msg = net.expect(from, MessageKind::MatrixBlock)?;
            self.check_tag(msg.batch_tag)?;
            msg.into_matrix()?
        };
        let state = self.round.take().expect("round state");
        let total = state
            .partner_grad
            .as_ref()
            .expect("partner gradient received")
            .add(&cross)?;
        let grads = self.model.backprop(&state.cache, &total)?;
        self.optimizer.step(&mut self.model, &grads)?;
        self.stage = Stage::Idle;
        Ok(state.align_loss.unwrap_or(f64::NAN))
    }
}

/// Per-round alignment losses as observed by each data owner: `at_a` is
/// `g`'s loss on A's data, `at_b` is `f`'s loss on B's data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLosses {
    pub at_a: f64,
    pub at_b: f64,
}

/// Exchanges public keys (two Control messages).
pub fn exchange_keys(
    a: &mut DualParty,
    b: &mut DualParty,
    net_a: &mut Endpoint,
    net_b: &mut Endpoint,
) -> Result<()> {
    a.send_key(net_a)?;
    b.send_key(net_b)?;
    b.receive_key(net_b)?;
    a.receive_key(net_a)?;
    Ok(())
}

/// One minibatch of dual training in protocol order.
pub fn run_dual_round(
    a: &mut DualParty,
    b: &mut DualParty,
    ids: &[u64],
    tag: u64,
    net_a: &mut Endpoint,
    net_b: &mut Endpoint,
) -> Result<RoundLosses> {
    if a.side != Side::A || b.side != Side::B {
        return Err(Error::InvalidArgument("parties passed in the wrong order".into()));
    }
    if net_a.actor() != Actor::A || net_b.actor() != Actor::B {
        return Err(Error::InvalidArgument("endpoints passed in the wrong order".into()));
    }
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    a.step_infer(ids, tag, net_a)?;
    b.step_infer(ids, tag, net_b)?;
    b.step_local_terms(net_b)?;
    a.step_local_terms(net_a)?;
    a.step_cross(net_a)?;
    b.step_cross(net_b)?;
    let at_b = b.step_update(net_b)?;
    let at_a = a.step_update(net_a)?;
    Ok(RoundLosses { at_a, at_b })
}

/// Mean per-epoch alignment losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DualTrainingLog {
    pub epochs: Vec<RoundLosses>,
    pub rounds: u64,
}

/// Trains both generators for `epochs` passes over the co-occurrence ids.
/// Both parties walk the same seeded permutation, so batches align by id.
/// `first_epoch` indexes the shuffle streams so later calls continue the
/// sequence; `tag` is the next batch tag and is advanced per round.
#[allow(clippy::too_many_arguments)]
pub fn train_duals(
    a: &mut DualParty,
    b: &mut DualParty,
    ids: &[u64],
    epochs: usize,
    batch_size: usize,
    seed: u64,
    first_epoch: u64,
    tag: &mut u64,
    net_a: &mut Endpoint,
    net_b: &mut Endpoint,
) -> Result<DualTrainingLog> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no co-occurrence samples to train on".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
    }
    let mut log = DualTrainingLog::default();
    for epoch in 0..epochs as u64 {
        let mut order = ids.to_vec();
        order.shuffle(&mut rng::indexed_stream(seed, streams::DUAL_BATCHES, first_epoch + epoch));
        let (mut sum_a, mut sum_b, mut n) = (0.0, 0.0, 0.0);
        for batch in order.chunks(batch_size) {
            let l = run_dual_round(a, b, batch, *tag, net_a, net_b)?;
            if !l.at_a.is_finite() || !l.at_b.is_finite() {
                return Err(Error::NonFinite("dual alignment loss"));
            }
            let w = batch.len() as f64;
            sum_a += l.at_a * w;
            sum_b += l.at_b * w;
            n += w;
            *tag += 1;
            log.rounds += 1;
        }
        log.epochs.push(RoundLosses {
            at_a: sum_a / n,
            at_b: sum_b / n,
        });
    }
    Ok(log)
}
