//! The full lifecycle: γ-split, entity alignment, perturbation, dual
//! cross-validation with threshold `T` and at most `m` iterations, data
//! supplement by dual inference, and the final comparison of the central
//! model trained with (`dual_T`) and without (`joint_T`) supplemented rows.
//!
//! The driver sequences the three actors over the transport. It also holds
//! the full labeled table, but uses it only to build each party's local
//! view and to score metrics that no single actor could compute.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    blinded_intersection, kfold_split, partition_features, split_by_gamma, AlignmentOutcome, GammaSplit,
    PartyDataset, Side, SplitSpec,
};
use crate::density::KdeModel;
use crate::dp::{perturb_dataset, DpConfig, PerturbedDataset, ReleasedFeatures, SensitivityMode};
use crate::dual::{exchange_keys, infer_released, train_duals, DualConfig, DualModelPair, DualParty};
use crate::error::{Error, Result};
use crate::he::{keygen, DEFAULT_KEY_BITS, DEFAULT_SCALE_BITS};
use crate::nn::{dual_network, hidden_width, Tensor2};
use crate::rng::{self, streams};
use crate::transport::{
    connect, transcript_assert, Actor, AssertReport, Backend, Endpoints, MessageKind, Payload, Predicate,
    PredicateOutcome, Transcript, Violation, DEFAULT_TIMEOUT,
};
use crate::vertical::{accuracy, Collaborator, FeatureStore, LocalParty, SplitCentralModel, SplitSession};

/// Run configuration. Defaults follow the simple-dataset preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpdlConfig {
    pub gamma: f64,
    /// `f64::INFINITY` disables perturbation; serialized as `"inf"`.
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub sensitivity_mode: SensitivityMode,
    pub lambda: f64,
    pub folds: usize,
    pub threshold: f64,
    pub max_iters: usize,
    pub dual_epochs: usize,
    pub central_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub key_bits: u64,
    pub scale_bits: u32,
    pub exact_duality_grad: bool,
    /// `false` runs the plaintext shadow of the dual protocol. Test use only.
    pub encryption: bool,
    /// Gradient-norm bound of the dual models' SGD; `None` disables it.
    pub dual_max_grad_norm: Option<f64>,
    /// `|h0|` in the sensitivity; defaults to the central hidden width.
    pub h0_width: Option<usize>,
    pub backend: Backend,
}

impl Default for MpdlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            epsilon: 2.0,
            sensitivity_mode: SensitivityMode::PerNeuron,
            lambda: 0.01,
            folds: 5,
            threshold: 0.15,
            max_iters: 2,
            dual_epochs: 10,
            central_epochs: 20,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
            test_fraction: 0.1,
            key_bits: DEFAULT_KEY_BITS,
            scale_bits: DEFAULT_SCALE_BITS,
            exact_duality_grad: false,
            encryption: true,
            dual_max_grad_norm: Some(1.0),
            h0_width: None,
            backend: Backend::InProcess,
        }
    }
}

impl MpdlConfig {
    /// `T = 0.1`, `m = 4`, for datasets with many features.
    pub fn complex() -> Self {
        Self {
            threshold: 0.1,
            max_iters: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must be in (0, 1), got {}", self.gamma));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be ≥ 1".into());
        }
        if self.folds < 2 || self.folds < self.max_iters {
            return bad(format!(
                "folds K = {} must be ≥ 2 and ≥ max_iters m = {}",
                self.folds, self.max_iters
            ));
        }
        if !self.threshold.is_finite() {
            return bad(format!("threshold must be finite, got {}", self.threshold));
        }
        if !(self.lambda >= 0.0) || !(self.lr > 0.0) {
            return bad(format!("need λ ≥ 0 and lr > 0, got {} and {}", self.lambda, self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        Ok(())
    }

    fn dual(&self) -> DualConfig {
        DualConfig {
            lambda_a: self.lambda,
            lambda_b: self.lambda,
            lr: self.lr,
            batch_size: self.batch_size,
            exact_duality_grad: self.exact_duality_grad,
            encryption: self.encryption,
            scale_bits: self.scale_bits,
            max_grad_norm: self.dual_max_grad_norm,
        }
    }
}

/// JSON has no infinity; the budget travels as a number or `"inf"`.
mod epsilon_serde {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(D::Error::custom(format!("invalid epsilon {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub fold: usize,
    pub v_c: f64,
    pub v_d: f64,
    /// Last-epoch alignment loss of `g` on A's data and of `f` on B's data.
    pub align_loss_a: f64,
    pub align_loss_b: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub co_occurrence: usize,
    pub b_only: usize,
    pub a_only: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: MpdlConfig,
    pub sizes: SplitSizes,
    pub iterations: Vec<IterationRecord>,
    /// Whether some iteration met `V_D − V_C > T`.
    pub converged: bool,
    pub joint_t: f64,
    pub dual_t: f64,
    pub mpdl_a: f64,
    /// MAE between A's raw test features and B's inference of them.
    pub mae_a: f64,
    /// MAE between B's raw test features and A's inference of them.
    pub mae_b: f64,
    /// Mean of the two directions.
    pub inference_mae: f64,
    pub messages: usize,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat `kind,iteration,metric,value` rows.
    pub fn csv_rows(&self) -> Vec<(String, String, String, f64)> {
        let mut rows = Vec::new();
        for it in &self.iterations {
            let i = it.iteration.to_string();
            for (metric, v) in [
                ("fold", it.fold as f64),
                ("v_c", it.v_c),
                ("v_d", it.v_d),
                ("align_loss_a", it.align_loss_a),
                ("align_loss_b", it.align_loss_b),
            ] {
                rows.push(("iteration".into(), i.clone(), metric.into(), v));
            }
        }
        for (metric, v) in [
            ("converged", f64::from(u8::from(self.converged))),
            ("joint_t", self.joint_t),
            ("dual_t", self.dual_t),
            ("mpdl_a", self.mpdl_a),
            ("mae_a", self.mae_a),
            ("mae_b", self.mae_b),
            ("inference_mae", self.inference_mae),
        ] {
            rows.push(("final".into(), String::new(), metric.into(), v));
        }
        rows
    }
}

/// Everything a run produces.
pub struct MpdlOutcome {
    pub report: RunReport,
    /// `M_D`, the returned central model.
    pub dual_model: SplitCentralModel,
    /// `M_C` of the final iteration.
    pub joint_model: SplitCentralModel,
    pub duals: DualModelPair,
    pub split: GammaSplit,
    pub alignment: AlignmentOutcome,
    pub transcript: Transcript,
    /// Message-count boundaries of the run phases.
    pub phases: Phases,
    pub perturbed_a: Arc<PerturbedDataset>,
    pub perturbed_b: Arc<PerturbedDataset>,
    pub keys: (crate::he::KeyId, crate::he::KeyId),
}

/// Transcript offsets where each phase starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phases {
    pub alignment: usize,
    pub training: usize,
    pub prediction: usize,
    pub end: usize,
}

/// `mean |raw − inferred|` over all entries.
pub fn inference_mae(raw: &Tensor2, inferred: &Tensor2) -> Result<f64> {
    raw.ensure_shape(inferred, "inference_mae")?;
    if raw.data().is_empty() {
        return Err(Error::InvalidArgument("inference_mae on an empty matrix".into()));
    }
    let sum: f64 = raw.data().iter().zip(inferred.data()).map(|(r, i)| (r - i).abs()).sum();
    Ok(sum / raw.data().len() as f64)
}

/// Token A attaches to a query so B can tell whether it holds the id.
pub fn query_token(salt: &[u8], id: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"query");
    h.update(salt);
    h.update(id.to_le_bytes());
    h.finalize().into()
}

/// Opaque handle under which B releases a B-only row to A.
fn row_handle(key: &[u8; 32], id: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(key);
    h.update(id.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) | (1 << 63)
}

/// B's side of query routing: its released rows keyed by query token.
pub struct QueryDirectory {
    tokens: HashMap<[u8; 32], usize>,
    rows: ReleasedFeatures,
}

impl QueryDirectory {
    pub fn new(salt: &[u8], data: &PerturbedDataset) -> Self {
        Self {
            tokens: data
                .ids()
                .iter()
                .enumerate()
                .map(|(i, &id)| (query_token(salt, id), i))
                .collect(),
            rows: data.released(),
        }
    }
}

/// Predicts labels for ids held by A. A sends each query's token and its
/// inferred `x̂^B`; B uses its own row when it holds the id and the
/// inferred row otherwise; C returns the labels to A.
#[allow(clippy::too_many_arguments)]
pub fn predict_unlabeled(
    query_ids: &[u64],
    salt: &[u8],
    a_dual: &DualParty,
    a_local: &LocalParty,
    b_local: &LocalParty,
    b_directory: &QueryDirectory,
    c: &Collaborator,
    tag: u64,
    net: &mut Endpoints,
) -> Result<Vec<usize>> {
    if query_ids.is_empty() {
        return Ok(Vec::new());
    }
    // A
    let x_a = a_dual.data().released_rows(query_ids)?;
    let x_hat_b = infer_released(a_dual.model(), &x_a)?;
    let tokens = query_ids.iter().map(|&id| query_token(salt, id)).collect();
    net.a.send(Actor::B, MessageKind::BlindedIds, Some(tag), Payload::Tokens(tokens))?;
    net.a.send(Actor::B, MessageKind::InferredBatch, Some(tag), Payload::Matrix(x_hat_b.into_tensor()))?;
    a_local.forward_rows(x_a.as_tensor(), tag, &mut net.a)?;

    // B
    let tokens = net.b.expect(Actor::A, MessageKind::BlindedIds)?.into_tokens()?;
    let inferred = net.b.expect(Actor::A, MessageKind::InferredBatch)?.into_matrix()?;
    if inferred.rows() != tokens.len() {
        return Err(Error::shape("query batch", tokens.len(), inferred.rows()));
    }
    let own = b_directory.rows.as_tensor();
    let mut rows = inferred;
    for (i, t) in tokens.iter().enumerate() {
        if let Some(&r) = b_directory.tokens.get(t) {
            rows.row_mut(i).copy_from_slice(own.row(r));
        }
    }
    b_local.forward_rows(&rows, tag, &mut net.b)?;

    // C
    c.predict(tag, Actor::A, &mut net.c)?;

    // A
    let msg = net.a.expect(Actor::C, MessageKind::Control)?;
    if msg.batch_tag != Some(tag) {
        return Err(Error::Protocol("prediction for a different query batch".into()));
    }
    msg.into_labels()
}

fn union(parts: &[&[u64]]) -> Vec<u64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Models of one cross-validation iteration.
struct CentralPair {
    joint: (LocalParty, LocalParty, Collaborator),
    dual: (LocalParty, LocalParty, Collaborator),
}

fn session<'a>(
    parts: &'a mut (LocalParty, LocalParty, Collaborator),
    net: &'a mut Endpoints,
) -> SplitSession<'a> {
    SplitSession {
        a: &mut parts.0,
        b: &mut parts.1,
        c: &mut parts.2,
        net_a: &mut net.a,
        net_b: &mut net.b,
        net_c: &mut net.c,
    }
}

fn snapshot(parts: &(LocalParty, LocalParty, Collaborator)) -> SplitCentralModel {
    SplitCentralModel {
        local_a: parts.0.layer().clone(),
        local_b: parts.1.layer().clone(),
        central: parts.2.central().clone(),
    }
}

/// B scores C's predictions against the labels it holds.
fn scored(predicted: &[usize], ids: &[u64], labels_b: &HashMap<u64, usize>) -> Result<f64> {
    let truth = ids
        .iter()
        .map(|id| labels_b.get(id).copied().ok_or_else(|| Error::Data(format!("B has no label for {id}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(predicted, &truth))
}

struct DualSetup {
    a: DualParty,
    b: DualParty,
    perturbed_a: Arc<PerturbedDataset>,
    perturbed_b: Arc<PerturbedDataset>,
    keys: (crate::he::KeyId, crate::he::KeyId),
}

/// Perturbs every row each party holds once, with `L` the size of its
/// training set, fits each party's KDE on its perturbed training rows,
/// initializes both generators and exchanges public keys.
fn setup_duals(
    config: &MpdlConfig,
    view_a: &PartyDataset,
    view_b: &PartyDataset,
    train_a: &[u64],
    train_b: &[u64],
    h0: usize,
    net: &mut Endpoints,
) -> Result<DualSetup> {
    let seed = config.seed;
    let dp = |n| DpConfig::new(config.epsilon, h0, n, config.sensitivity_mode);
    let perturbed_a = Arc::new(perturb_dataset(
        view_a.ids(),
        view_a.features(),
        &dp(train_a.len())?,
        &mut rng::stream(seed, streams::DP_A),
    )?);
    let perturbed_b = Arc::new(perturb_dataset(
        view_b.ids(),
        view_b.features(),
        &dp(train_b.len())?,
        &mut rng::stream(seed, streams::DP_B),
    )?);
    let dual_cfg = config.dual();
    let keys_a = keygen(config.key_bits, &mut rng::stream(seed, streams::KEYS_A))?;
    let keys_b = keygen(config.key_bits, &mut rng::stream(seed, streams::KEYS_B))?;
    let keys = (keys_a.id(), keys_b.id());
    let kde_a = KdeModel::fit(perturbed_a.released_rows(train_a)?.into_tensor())?;
    let kde_b = KdeModel::fit(perturbed_b.released_rows(train_b)?.into_tensor())?;
    let (d_a, d_b) = (view_a.width(), view_b.width());
    let f = dual_network(d_a, d_b, &mut rng::stream(seed, streams::DUAL_INIT_A))?;
    let g = dual_network(d_b, d_a, &mut rng::stream(seed, streams::DUAL_INIT_B))?;
    let mut a = DualParty::new(Side::A, f, perturbed_a.clone(), kde_a, keys_a, dual_cfg.optimizer(), &dual_cfg, seed)?;
    let mut b = DualParty::new(Side::B, g, perturbed_b.clone(), kde_b, keys_b, dual_cfg.optimizer(), &dual_cfg, seed)?;
    exchange_keys(&mut a, &mut b, &mut net.a, &mut net.b)?;
    Ok(DualSetup {
        a,
        b,
        perturbed_a,
        perturbed_b,
        keys,
    })
}

/// A dual pair trained outside the classification lifecycle.
pub struct DualFit {
    pub pair: DualModelPair,
    pub perturbed_a: Arc<PerturbedDataset>,
    pub perturbed_b: Arc<PerturbedDataset>,
    pub transcript: Transcript,
}

/// Trains a dual pair on the rows `common` to both views for
/// `config.dual_epochs` epochs. Every held row counts as a training row for
/// perturbation and density estimation; `|h0|` defaults to the hidden width
/// of a two-class central model.
pub fn fit_duals(config: &MpdlConfig, view_a: &PartyDataset, view_b: &PartyDataset, common: &[u64]) -> Result<DualFit> {
    config.validate()?;
    if common.is_empty() {
        return Err(Error::InvalidArgument("no co-occurrence samples".into()));
    }
    let mut d_c = common.to_vec();
    d_c.sort_unstable();
    let mut net = connect(config.backend, DEFAULT_TIMEOUT.max(Duration::from_secs(60)))?;
    let h0 = config
        .h0_width
        .unwrap_or_else(|| hidden_width(view_a.width() + view_b.width(), 2));
    let DualSetup {
        mut a,
        mut b,
        perturbed_a,
        perturbed_b,
        ..
    } = setup_duals(config, view_a, view_b, view_a.ids(), view_b.ids(), h0, &mut net)?;
    let mut tag = 0;
    let log = train_duals(
        &mut a,
        &mut b,
        &d_c,
        config.dual_epochs,
        config.batch_size,
        config.seed,
        0,
        &mut tag,
        &mut net.a,
        &mut net.b,
    )?;
    Ok(DualFit {
        pair: DualModelPair {
            theta_ab: a.into_model(),
            theta_ba: b.into_model(),
            lambda_a: config.lambda,
            lambda_b: config.lambda,
            rounds: log.rounds,
        },
        perturbed_a,
        perturbed_b,
        transcript: net.transcript(),
    })
}

/// Runs the whole lifecycle on `table` with columns assigned by
/// `assignment`.
pub fn mpdl_train(config: &MpdlConfig, table: &PartyDataset, assignment: &[Side]) -> Result<MpdlOutcome> {
    config.validate()?;
    let classes = table
        .classes()
        .ok_or_else(|| Error::Data("the table needs labels".into()))?;
    if classes < 2 {
        return Err(Error::Data("the labels need at least two classes".into()));
    }
    let seed = config.seed;
    let (a_full, b_full, _) = partition_features(table, assignment)?;
    let split = split_by_gamma(
        table.ids(),
        &SplitSpec {
            gamma: config.gamma,
            test_fraction: config.test_fraction,
            seed,
        },
    )?;
    if split.co_occurrence.len() < config.folds {
        return Err(Error::InvalidArgument(format!(
            "{} co-occurrence rows cannot fill {} folds",
            split.co_occurrence.len(),
            config.folds
        )));
    }
    if split.test.is_empty() {
        return Err(Error::InvalidArgument("the split leaves no test rows".into()));
    }

    // Local views. Test rows are held by both sides.
    let train_a = union(&[&split.co_occurrence, &split.a_only]);
    let train_b = union(&[&split.co_occurrence, &split.b_only]);
    let view_a = a_full.select_ids(&union(&[&train_a, &split.test]))?.without_labels();
    let view_b = b_full.select_ids(&union(&[&train_b, &split.test]))?;
    let labels_b: HashMap<u64, usize> = view_b
        .ids()
        .iter()
        .copied()
        .zip(view_b.labels().expect("B holds labels").iter().copied())
        .collect();

    let mut net = connect(config.backend, DEFAULT_TIMEOUT.max(Duration::from_secs(60)))?;
    let mut phases = Phases::default();

    // Entity alignment over the training ids.
    let alignment = blinded_intersection(&train_a, &train_b, &mut net.a, &mut net.b, config.key_bits, seed)?;
    let mut d_c = alignment.common_at_a.clone();
    if d_c != alignment.common_at_b {
        return Err(Error::Protocol("parties disagree on the intersection".into()));
    }
    if d_c.is_empty() {
        return Err(Error::InvalidArgument("no co-occurrence samples".into()));
    }
    d_c.sort_unstable();
    phases.training = net.transcript().len();

    let h0 = config
        .h0_width
        .unwrap_or_else(|| hidden_width(view_a.width() + view_b.width(), classes));
    let DualSetup {
        a: mut dual_a,
        b: mut dual_b,
        perturbed_a,
        perturbed_b,
        keys: key_ids,
    } = setup_duals(config, &view_a, &view_b, &train_a, &train_b, h0, &mut net)?;
    let (d_a, d_b) = (view_a.width(), view_b.width());

    // B releases its B-only rows under opaque handles.
    let mut handle_key = [0u8; 32];
    rng::indexed_stream(seed, streams::DP_B, 1).fill_bytes(&mut handle_key);
    let handles: Vec<u64> = split.b_only.iter().map(|&id| row_handle(&handle_key, id)).collect();
    {
        let taken: HashSet<u64> = table.ids().iter().copied().collect();
        let distinct: HashSet<u64> = handles.iter().copied().collect();
        if distinct.len() != handles.len() || handles.iter().any(|h| taken.contains(h)) {
            return Err(Error::Data("row handle collision".into()));
        }
    }
    let handle_labels: Vec<usize> = split.b_only.iter().map(|id| labels_b[id]).collect();

    // Labels for every training row go from B to C once.
    let mut label_ids = d_c.clone();
    label_ids.extend(&handles);
    let mut label_values: Vec<usize> = d_c.iter().map(|id| labels_b[id]).collect();
    label_values.extend(&handle_labels);
    net.b.send(Actor::C, MessageKind::Control, None, Payload::Ids(label_ids))?;
    net.b.send(Actor::C, MessageKind::Control, None, Payload::Labels(label_values))?;
    let placeholder = SplitCentralModel::init(d_a, d_b, classes, seed)?.central;
    let mut c_labels = Collaborator::new(placeholder, config.lr);
    c_labels.receive_labels(&mut net.c)?;

    // Stores. A's own rows; B's own rows plus its B-only rows under handles.
    let store_a = FeatureStore::new(perturbed_a.ids(), perturbed_a.released())?;
    let store_b_joint = FeatureStore::new(perturbed_b.ids(), perturbed_b.released())?;
    let mut store_b_dual = store_b_joint.clone();
    store_b_dual.extend(&handles, perturbed_b.released_rows(&split.b_only)?)?;

    let folds = kfold_split(&d_c, config.folds, seed)?;
    let mut fold_order: Vec<usize> = (0..config.folds).collect();
    fold_order.shuffle(&mut rng::stream(seed, streams::FOLD_PICK));

    let mut tag: u64 = 0;
    let mut dual_epochs_done: u64 = 0;
    let mut dual_rounds: u64 = 0;
    let mut iterations = Vec::new();
    let mut converged = false;
    let mut last: Option<CentralPair> = None;
    for (j, &k) in fold_order.iter().take(config.max_iters).enumerate() {
        let iter_seed = rng::indexed_stream(seed, streams::CENTRAL_INIT, 1000 + j as u64).next_u64();
        let d_v = &folds[k];
        let d_t: Vec<u64> = folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();

        // Duals continue training on all of D_C.
        let log = train_duals(
            &mut dual_a,
            &mut dual_b,
            &d_c,
            config.dual_epochs,
            config.batch_size,
            seed,
            dual_epochs_done,
            &mut tag,
            &mut net.a,
            &mut net.b,
        )?;
        dual_epochs_done += config.dual_epochs as u64;
        dual_rounds += log.rounds;
        let last_epoch = log.epochs.last().copied();

        // D_P: B infers A's side of its B-only rows and sends it to A.
        let mut store_a_dual = store_a.clone();
        if !split.b_only.is_empty() {
            let x_b = perturbed_b.released_rows(&split.b_only)?;
            let x_hat_a = infer_released(dual_b.model(), &x_b)?;
            net.b.send(Actor::A, MessageKind::Control, Some(tag), Payload::Ids(handles.clone()))?;
            net.b.send(Actor::A, MessageKind::InferredBatch, Some(tag), Payload::Matrix(x_hat_a.into_tensor()))?;
            let ids = net.a.expect(Actor::B, MessageKind::Control)?.into_ids()?;
            let rows = net.a.expect(Actor::B, MessageKind::InferredBatch)?.into_matrix()?;
            store_a_dual.extend(&ids, ReleasedFeatures::from_inference(rows))?;
            tag += 1;
        }

        // Fresh central models, identical starting weights for both.
        let init = SplitCentralModel::init(d_a, d_b, classes, iter_seed)?;
        let mut pair = CentralPair {
            joint: (
                LocalParty::new(Side::A, init.local_a.clone(), store_a.clone(), config.lr)?,
                LocalParty::new(Side::B, init.local_b.clone(), store_b_joint.clone(), config.lr)?,
                c_labels.with_model(init.central.clone()),
            ),
            dual: (
                LocalParty::new(Side::A, init.local_a.clone(), store_a_dual, config.lr)?,
                LocalParty::new(Side::B, init.local_b.clone(), store_b_dual.clone(), config.lr)?,
                c_labels.with_model(init.central.clone()),
            ),
        };
        let dual_rows = union(&[&d_t, &handles]);
        let central_seed = iter_seed ^ 0x5eed;
        session(&mut pair.joint, &mut net).train(&d_t, config.central_epochs, config.batch_size, central_seed, tag)?;
        tag += 1_000_000;
        session(&mut pair.dual, &mut net).train(&dual_rows, config.central_epochs, config.batch_size, central_seed, tag)?;
        tag += 1_000_000;

        let v_c = scored(&session(&mut pair.joint, &mut net).predict(d_v, tag)?, d_v, &labels_b)?;
        tag += 1;
        let v_d = scored(&session(&mut pair.dual, &mut net).predict(d_v, tag)?, d_v, &labels_b)?;
        tag += 1;
        log::info!("iteration {j}: fold {k}, V_C = {v_c:.4}, V_D = {v_d:.4}");
        iterations.push(IterationRecord {
            iteration: j,
            fold: k,
            v_c,
            v_d,
            align_loss_a: last_epoch.map_or(f64::NAN, |l| l.at_a),
            align_loss_b: last_epoch.map_or(f64::NAN, |l| l.at_b),
        });
        last = Some(pair);
        if v_d - v_c > config.threshold {
            converged = true;
            break;
        }
    }
    let mut pair = last.expect("at least one iteration");

    // Final test accuracies, scored by B.
    let joint_t = scored(&session(&mut pair.joint, &mut net).predict(&split.test, tag)?, &split.test, &labels_b)?;
    tag += 1;
    let dual_t = scored(&session(&mut pair.dual, &mut net).predict(&split.test, tag)?, &split.test, &labels_b)?;
    tag += 1;

    // A-only rows through query routing; the driver scores them.
    phases.prediction = net.transcript().len();
    let mpdl_a = if split.a_only.is_empty() {
        f64::NAN
    } else {
        let directory = QueryDirectory::new(&alignment.salt, &perturbed_b);
        let predicted = predict_unlabeled(
            &split.a_only,
            &alignment.salt,
            &dual_a,
            &pair.dual.0,
            &pair.dual.1,
            &directory,
            &pair.dual.2,
            tag,
            &mut net,
        )?;
        accuracy(&predicted, &table.labels_for(&split.a_only)?)
    };
    phases.end = net.transcript().len();

    // Leakage proxy on the test rows, which neither dual model trained on.
    let raw_a = a_full.select_ids(&split.test)?;
    let raw_b = b_full.select_ids(&split.test)?;
    let inferred_a = infer_released(dual_b.model(), &perturbed_b.released_rows(&split.test)?)?;
    let inferred_b = infer_released(dual_a.model(), &perturbed_a.released_rows(&split.test)?)?;
    let mae_a = inference_mae(raw_a.features(), inferred_a.as_tensor())?;
    let mae_b = inference_mae(raw_b.features(), inferred_b.as_tensor())?;

    let transcript = net.transcript();
    let report = RunReport {
        config: config.clone(),
        sizes: SplitSizes {
            co_occurrence: split.co_occurrence.len(),
            b_only: split.b_only.len(),
            a_only: split.a_only.len(),
            test: split.test.len(),
        },
        iterations,
        converged,
        joint_t,
        dual_t,
        mpdl_a,
        mae_a,
        mae_b,
        inference_mae: (mae_a + mae_b) / 2.0,
        messages: transcript.len(),
    };
    Ok(MpdlOutcome {
        report,
        dual_model: snapshot(&pair.dual),
        joint_model: snapshot(&pair.joint),
        duals: DualModelPair {
            theta_ab: dual_a.into_model(),
            theta_ba: dual_b.into_model(),
            lambda_a: config.lambda,
            lambda_b: config.lambda,
            rounds: dual_rounds,
        },
        split,
        alignment,
        transcript,
        phases,
        perturbed_a,
        perturbed_b,
        keys: key_ids,
    })
}

/// Checks a finished run's transcript against the party boundaries. `table`
/// and `assignment` must be the ones the run was given; the raw rows serve
/// as the secrets that must never cross.
///
/// Whole run: no raw or perturbed rows of one party reach another actor, no
/// plaintext log-densities of the co-occurrence rows leave their owner,
/// ciphertexts between A and B are under the two run keys and C sees none,
/// each channel carries only its protocol's kinds (no plaintext
/// `MatrixBlock`), and A never learns a B-only id. Up to the prediction
/// phase B never learns an A-only id; afterwards query tokens tell B which
/// ids it does not hold, by design. Alignment must also reveal exactly the
/// co-occurrence set to both sides.
pub fn boundary_report(outcome: &MpdlOutcome, table: &PartyDataset, assignment: &[Side]) -> Result<AssertReport> {
    use MessageKind::*;
    let (a_full, b_full, _) = partition_features(table, assignment)?;
    let (pa, pb) = (&outcome.perturbed_a, &outcome.perturbed_b);
    let raw_a = a_full.select_ids(pa.ids())?.features().clone();
    let raw_b = b_full.select_ids(pb.ids())?.features().clone();
    let split = &outcome.split;
    let train_a = union(&[&split.co_occurrence, &split.a_only]);
    let train_b = union(&[&split.co_occurrence, &split.b_only]);
    let log_densities = |p: &PerturbedDataset, train: &[u64]| -> Result<Vec<f64>> {
        let kde = KdeModel::fit(p.released_rows(train)?.into_tensor())?;
        kde.log_density_rows(p.released_rows(&split.co_occurrence)?.as_tensor())
    };
    let (key_a, key_b) = outcome.keys;
    let universe = table.ids();

    let rows = |to, label: &str, rows: &Tensor2| Predicate::NoRowsTo {
        to,
        label: label.into(),
        rows: rows.clone(),
    };
    let kinds = |from, to, kinds: &[MessageKind]| Predicate::KindsAllowed {
        from,
        to,
        kinds: kinds.to_vec(),
    };
    let peer = [BlindedIds, Control, InferredBatch, GradTerm, CipherBlock];
    let whole = vec![
        rows(Actor::B, "A's raw features", &raw_a),
        rows(Actor::C, "A's raw features", &raw_a),
        rows(Actor::A, "B's raw features", &raw_b),
        rows(Actor::C, "B's raw features", &raw_b),
        rows(Actor::B, "A's perturbed features", pa.released().as_tensor()),
        rows(Actor::C, "A's perturbed features", pa.released().as_tensor()),
        rows(Actor::A, "B's perturbed features", pb.released().as_tensor()),
        rows(Actor::C, "B's perturbed features", pb.released().as_tensor()),
        Predicate::NoValuesTo {
            to: Actor::B,
            label: "A's log-densities".into(),
            values: log_densities(pa, &train_a)?,
        },
        Predicate::NoValuesTo {
            to: Actor::A,
            label: "B's log-densities".into(),
            values: log_densities(pb, &train_b)?,
        },
        Predicate::CipherKeys {
            to: Actor::A,
            keys: vec![key_a, key_b],
        },
        Predicate::CipherKeys {
            to: Actor::B,
            keys: vec![key_a, key_b],
        },
        Predicate::CipherKeys {
            to: Actor::C,
            keys: vec![],
        },
        kinds(Actor::A, Actor::B, &peer),
        kinds(Actor::B, Actor::A, &peer),
        kinds(Actor::A, Actor::C, &[PartialSum]),
        kinds(Actor::B, Actor::C, &[PartialSum, Control]),
        kinds(Actor::C, Actor::A, &[DeltaError, Control]),
        kinds(Actor::C, Actor::B, &[DeltaError, Control]),
        Predicate::NoIdsTo {
            to: Actor::A,
            label: "B-only".into(),
            forbidden: split.b_only.iter().copied().collect(),
            inverse: outcome.alignment.inverse_table_a(universe, pa.ids()),
        },
    ];
    let mut inverse_b = outcome.alignment.inverse_table_b(universe);
    inverse_b.extend(universe.iter().map(|&id| (query_token(&outcome.alignment.salt, id).to_vec(), id)));
    let before_prediction = vec![Predicate::NoIdsTo {
        to: Actor::B,
        label: "A-only".into(),
        forbidden: split.a_only.iter().copied().collect(),
        inverse: inverse_b,
    }];

    let mut report = transcript_assert(&outcome.transcript, &whole)?;
    let early = transcript_assert(&outcome.transcript.until(outcome.phases.prediction), &before_prediction)?;
    report.outcomes.extend(early.outcomes);

    let mut expected = split.co_occurrence.clone();
    expected.sort_unstable();
    let exact = outcome.alignment.common_at_a == expected && outcome.alignment.common_at_b == expected;
    report.outcomes.push(PredicateOutcome {
        name: "alignment reveals exactly the co-occurrence ids".into(),
        violation: (!exact).then(|| Violation {
            msg_id: outcome.transcript.until(outcome.phases.training).messages().last().map_or(0, |m| m.msg_id),
            detail: format!(
                "A learned {}, B learned {}, expected {}",
                outcome.alignment.common_at_a.len(),
                outcome.alignment.common_at_b.len(),
                expected.len()
            ),
        }),
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_arithmetic() {
        let raw = Tensor2::zeros(2, 3);
        assert_eq!(inference_mae(&raw, &raw).unwrap(), 0.0);
        assert_eq!(inference_mae(&raw, &Tensor2::filled(2, 3, 0.5)).unwrap(), 0.5);
        assert!(inference_mae(&raw, &Tensor2::zeros(3, 2)).is_err());
    }

    #[test]
    fn config_rejects_fewer_folds_than_iterations() {
        let c = MpdlConfig {
            folds: 3,
            max_iters: 4,
            ..MpdlConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(MpdlConfig::default().validate().is_ok());
        assert!(MpdlConfig::complex().validate().is_ok());
    }

    #[test]
    fn config_rejects_bad_gamma_and_epsilon() {
        for c in [
            MpdlConfig { gamma: 0.0, ..MpdlConfig::default() },
            MpdlConfig { gamma: 1.0, ..MpdlConfig::default() },
            MpdlConfig { epsilon: 0.0, ..MpdlConfig::default() },
            MpdlConfig { epsilon: f64::NAN, ..MpdlConfig::default() },
        ] {
            assert!(c.validate().is_err());
        }
        let inf = MpdlConfig { epsilon: f64::INFINITY, ..MpdlConfig::default() };
        assert!(inf.validate().is_ok());
    }

    #[test]
    fn infinite_epsilon_round_trips_through_json() {
        let c = MpdlConfig { epsilon: f64::INFINITY, ..MpdlConfig::default() };
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"epsilon\":\"inf\""));
        assert_eq!(serde_json::from_str::<MpdlConfig>(&json).unwrap(), c);
    }

    #[test]
    fn handles_are_stable_and_high() {
        let k = [7u8; 32];
        assert_eq!(row_handle(&k, 5), row_handle(&k, 5));
        assert_ne!(row_handle(&k, 5), row_handle(&k, 6));
        assert!(row_handle(&k, 5) >= 1 << 63);
    }
}
