//! Graph workloads: completing node feature matrices with a dual pair, node
//! representations `M_rep = M_adj · M_feat`, the confusion-matrix product
//! between parties and link-prediction AUC.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{load_normalize, normalize_min_max, split_by_gamma, CsvSchema, FeaturePartition, PartyDataset, SplitSpec};
use crate::dual::{dual_infer, DualModelPair};
use crate::error::{Error, Result};
use crate::nn::Tensor2;
use crate::orchestrator::{fit_duals, MpdlConfig};
use crate::rng::{self, streams};
use crate::transport::{Actor, Endpoints, MessageKind, Payload};

/// Undirected graph over local node ids with one feature row per node.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyGraph {
    ids: Vec<u64>,
    /// Sorted, without repeats or self loops; `j ∈ neighbors[i]` iff `i ∈ neighbors[j]`.
    neighbors: Vec<Vec<usize>>,
    features: Tensor2,
}

impl PartyGraph {
    /// `edges` index into `ids` and are stored in both directions. Self
    /// loops and repeats are dropped.
    pub fn new(ids: Vec<u64>, edges: &[(usize, usize)], features: Tensor2) -> Result<Self> {
        let n = ids.len();
        if features.rows() != n {
            return Err(Error::shape("graph features", n, features.rows()));
        }
        if ids.iter().collect::<HashSet<_>>().len() != n {
            return Err(Error::Data("duplicate node ids".into()));
        }
        let mut sets = vec![BTreeSet::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if i != j {
                sets[i].insert(j);
                sets[j].insert(i);
            }
        }
        Ok(Self {
            ids,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            features,
        })
    }

    /// Edges given as node id pairs.
    pub fn from_id_edges(ids: Vec<u64>, edges: &[(u64, u64)], features: Tensor2) -> Result<Self> {
        let index: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let lookup = |id: u64| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Data(format!("edge endpoint {id} has no feature row")))
        };
        let edges = edges
            .iter()
            .map(|&(s, d)| Ok((lookup(s)?, lookup(d)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, &edges, features)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency(&self) -> Tensor2 {
        let n = self.len();
        let mut a = Tensor2::zeros(n, n);
        for (i, ns) in self.neighbors.iter().enumerate() {
            for &j in ns {
                a.set(i, j, 1.0);
            }
        }
        a
    }

    /// `adjacency() · feat` without forming the dense adjacency.
    pub fn representations(&self, feat: &Tensor2) -> Result<Tensor2> {
        if feat.rows() != self.len() {
            return Err(Error::shape("node representations", self.len(), feat.rows()));
        }
        let mut out = Tensor2::zeros(self.len(), feat.cols());
        for (i, ns) in self.neighbors.iter().enumerate() {
            let row = out.row_mut(i);
            for &j in ns {
                for (o, v) in row.iter_mut().zip(feat.row(j)) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }

    fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(self.ids.clone(), edges, self.features.clone())
    }
}

/// One `src dst` pair per line. Blank lines and lines starting with `#`
/// are skipped.
pub fn parse_edge_list(text: &str) -> Result<Vec<(u64, u64)>> {
    let mut edges = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::Data(format!("edge list line {}: bad node id {s:?}", n + 1)))
        };
        match parts.as_slice() {
            [s, d] => edges.push((parse(s)?, parse(d)?)),
            _ => return Err(Error::Data(format!("edge list line {}: expected two ids", n + 1))),
        }
    }
    Ok(edges)
}

pub fn load_edge_list(path: &Path) -> Result<Vec<(u64, u64)>> {
    parse_edge_list(&std::fs::read_to_string(path)?)
}

/// Edge list plus a feature CSV with an `id` column; features are min–max
/// normalized.
pub fn load_graph(edges: &Path, features: &Path) -> Result<PartyGraph> {
    let schema = CsvSchema {
        id_column: Some("id".into()),
        ..CsvSchema::default()
    };
    let table = load_normalize(features, &schema)?;
    PartyGraph::from_id_edges(table.ids().to_vec(), &load_edge_list(edges)?, table.features().clone())
}

/// `M_rep = M_adj · M_feat`. Unknown adjacency entries are expected as 0.
pub fn node_representations(adj: &Tensor2, feat: &Tensor2) -> Result<Tensor2> {
    if adj.cols() != feat.rows() {
        return Err(Error::shape("node representations", adj.cols(), feat.rows()));
    }
    adj.matmul(feat)
}

fn to_dmatrix(x: &Tensor2) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.rows(), x.cols(), x.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor2 {
    let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Tensor2::new(m.nrows(), m.ncols(), data).expect("shape from matrix")
}

fn singular_values(x: &Tensor2) -> Vec<f64> {
    to_dmatrix(x).singular_values().iter().copied().collect()
}

/// Ratio of extreme singular values; infinite when singular.
pub fn condition_number(x: &Tensor2) -> f64 {
    let sv = singular_values(x);
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if sv.is_empty() || min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Numerical rank with the usual `max(m, n)·σ_max·ε` cutoff.
pub fn rank(x: &Tensor2) -> usize {
    let sv = singular_values(x);
    let max = sv.iter().copied().fold(0.0, f64::max);
    let tol = x.rows().max(x.cols()) as f64 * max * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

pub const MAX_CONDITION: f64 = 1e8;

/// Invertible `f × f` mask `M^c` with its cached inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    matrix: Tensor2,
    inverse: Tensor2,
}

impl ConfusionMatrix {
    /// Accepts `matrix` when its condition number is below
    /// [`MAX_CONDITION`] and `M·M⁻¹` is within 1e-10 of the identity.
    pub fn new(matrix: Tensor2) -> Result<Self> {
        if matrix.rows() != matrix.cols() || matrix.rows() == 0 {
            return Err(Error::shape("confusion matrix", "non-empty square", format!("{:?}", matrix.shape())));
        }
        let cond = condition_number(&matrix);
        if !(cond < MAX_CONDITION) {
            return Err(Error::Singular(format!("condition number {cond:e}")));
        }
        let inv = to_dmatrix(&matrix)
            .try_inverse()
            .ok_or_else(|| Error::Singular("no inverse".into()))?;
        let inverse = from_dmatrix(&inv);
        let residual = matrix.matmul(&inverse)?.max_abs_diff(&Tensor2::identity(matrix.rows()));
        if !(residual <= 1e-10) {
            return Err(Error::Singular(format!("M·M⁻¹ off identity by {residual:e}")));
        }
        Ok(Self { matrix, inverse })
    }

    pub fn identity(f: usize) -> Self {
        Self {
            matrix: Tensor2::identity(f),
            inverse: Tensor2::identity(f),
        }
    }

    /// Entries uniform in `[−1, 1]`, redrawn until accepted.
    pub fn random<R: Rng + ?Sized>(f: usize, rng: &mut R) -> Result<Self> {
        const ATTEMPTS: usize = 100;
        for _ in 0..ATTEMPTS {
            let m = Tensor2::new(f, f, (0..f * f).map(|_| rng.gen_range(-1.0..=1.0)).collect())?;
            match Self::new(m) {
                Ok(c) => return Ok(c),
                Err(Error::Singular(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::Singular(format!("no acceptable {f}×{f} matrix in {ATTEMPTS} draws")))
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Tensor2 {
        &self.matrix
    }

    pub fn inverse(&self) -> &Tensor2 {
        &self.inverse
    }
}

/// B's `M_A·M_B` for A's `m_a` (m × n) and B's `m_b` (n × f) with a fresh
/// random confusion matrix.
pub fn confusion_protocol<R: Rng + ?Sized>(
    m_a: &Tensor2,
    m_b: &Tensor2,
    rng: &mut R,
    net: &mut Endpoints,
) -> Result<Tensor2> {
    let mc = ConfusionMatrix::random(m_b.cols(), rng)?;
    confusion_protocol_with(m_a, m_b, &mc, net)
}

/// Three messages: A announces its shape `(m, n)`; B checks `n > m` and
/// sends `M_B·M^c`; A returns `M_A·M_B·M^c`; B multiplies by `M^c⁻¹`. With
/// `n ≤ m` B aborts before revealing anything, since the product would then
/// determine A's matrix.
pub fn confusion_protocol_with(
    m_a: &Tensor2,
    m_b: &Tensor2,
    mc: &ConfusionMatrix,
    net: &mut Endpoints,
) -> Result<Tensor2> {
    // A
    net.a.send(
        Actor::B,
        MessageKind::Control,
        None,
        Payload::Ids(vec![m_a.rows() as u64, m_a.cols() as u64]),
    )?;

    // B
    let shape = net.b.expect(Actor::A, MessageKind::Control)?.into_ids()?;
    let [m, n] = shape[..] else {
        return Err(Error::Malformed(format!("shape announcement of {} values", shape.len())));
    };
    if n as usize != m_b.rows() {
        return Err(Error::shape("confusion protocol", m_b.rows(), n));
    }
    if n <= m {
        return Err(Error::InvalidArgument(format!(
            "need n > m for the confusion product, got n = {n}, m = {m}"
        )));
    }
    if mc.dim() != m_b.cols() {
        return Err(Error::shape("confusion matrix", m_b.cols(), mc.dim()));
    }
    net.b.send(Actor::A, MessageKind::MatrixBlock, None, Payload::Matrix(m_b.matmul(mc.matrix())?))?;

    // A
    let masked = net.a.expect(Actor::B, MessageKind::MatrixBlock)?.into_matrix()?;
    net.a.send(Actor::B, MessageKind::MatrixBlock, None, Payload::Matrix(m_a.matmul(&masked)?))?;

    // B
    let product = net.b.expect(Actor::A, MessageKind::MatrixBlock)?.into_matrix()?;
    product.matmul(mc.inverse())
}

/// `[x_A | x_B]` for every node, filling a node's missing side from the
/// other through the dual pair. Rows marked present are copied unchanged.
pub fn complete_feature_matrix(
    pair: &DualModelPair,
    x_a: &Tensor2,
    has_a: &[bool],
    x_b: &Tensor2,
    has_b: &[bool],
) -> Result<Tensor2> {
    if pair.rounds == 0 {
        return Err(Error::InvalidArgument("the dual pair is untrained".into()));
    }
    let n = x_a.rows();
    for (what, len) in [("x_B rows", x_b.rows()), ("A mask", has_a.len()), ("B mask", has_b.len())] {
        if len != n {
            return Err(Error::Shape {
                context: "feature completion",
                expected: format!("{n} {what}"),
                actual: len.to_string(),
            });
        }
    }
    if x_a.cols() != pair.theta_ab.input_width() || x_b.cols() != pair.theta_ba.input_width() {
        return Err(Error::shape(
            "feature completion widths",
            format!("{}+{}", pair.theta_ab.input_width(), pair.theta_ba.input_width()),
            format!("{}+{}", x_a.cols(), x_b.cols()),
        ));
    }
    if let Some(i) = (0..n).find(|&i| !has_a[i] && !has_b[i]) {
        return Err(Error::Data(format!("node row {i} has neither side")));
    }
    let fill = |own: &Tensor2, has: &[bool], other: &Tensor2, model| -> Result<Tensor2> {
        let missing: Vec<usize> = (0..n).filter(|&i| !has[i]).collect();
        let mut out = own.clone();
        if !missing.is_empty() {
            let inferred = dual_infer(model, &other.select_rows(&missing))?;
            for (k, &i) in missing.iter().enumerate() {
                out.row_mut(i).copy_from_slice(inferred.row(k));
            }
        }
        Ok(out)
    };
    let a = fill(x_a, has_a, x_b, &pair.theta_ba)?;
    let b = fill(x_b, has_b, x_a, &pair.theta_ab)?;
    a.hstack(&b)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn link_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::shape("link_auc", scores.len(), truth.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("link scores"));
    }
    let mut neg: Vec<f64> = scores.iter().zip(truth).filter(|(_, &t)| !t).map(|(&s, _)| s).collect();
    let pos: Vec<f64> = scores.iter().zip(truth).filter(|(_, &t)| t).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("AUC needs both positive and negative pairs".into()));
    }
    neg.sort_by(f64::total_cmp);
    // Twice the win count keeps half-counted ties integral.
    let mut twice: u64 = 0;
    for &p in &pos {
        let below = neg.partition_point(|&x| x < p) as u64;
        let at_or_below = neg.partition_point(|&x| x <= p) as u64;
        twice += 2 * below + (at_or_below - below);
    }
    Ok(twice as f64 / (2 * pos.len() as u64 * neg.len() as u64) as f64)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn cosine_scores(rep: &Tensor2, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs.iter().map(|&(i, j)| cosine(rep.row(i), rep.row(j))).collect()
}

/// Stochastic block model whose two feature sides are linearly related.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbmSpec {
    pub nodes: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub d_a: usize,
    pub d_b: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            nodes: 300,
            blocks: 3,
            p_in: 0.1,
            p_out: 0.005,
            d_a: 4,
            d_b: 4,
            noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticGraph {
    pub graph: PartyGraph,
    pub partition: FeaturePartition,
    pub blocks: Vec<usize>,
}

/// Node `i` sits in block `i mod blocks`. A's features are the block
/// centroid plus Gaussian noise; B's are a fixed linear map of A's plus
/// noise (an orthogonal map when the widths match). All columns are min–max
/// normalized afterwards.
pub fn sbm_graph(spec: &SbmSpec) -> Result<SyntheticGraph> {
    if spec.nodes < 2 || spec.blocks == 0 || spec.d_a == 0 || spec.d_b == 0 {
        return Err(Error::InvalidArgument("SBM needs ≥ 2 nodes, ≥ 1 block and both widths ≥ 1".into()));
    }
    for p in [spec.p_in, spec.p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("edge probability {p} outside [0, 1]")));
        }
    }
    let (n, d_a, d_b) = (spec.nodes, spec.d_a, spec.d_b);
    let blocks: Vec<usize> = (0..n).map(|i| i % spec.blocks).collect();

    let mut r = rng::indexed_stream(spec.seed, streams::GRAPH, 0);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if blocks[i] == blocks[j] { spec.p_in } else { spec.p_out };
            if r.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let mut r = rng::indexed_stream(spec.seed, streams::GRAPH, 1);
    let mut gauss = move || -> f64 { StandardNormal.sample(&mut r) };
    let centroids: Vec<Vec<f64>> = (0..spec.blocks)
        .map(|_| (0..d_a).map(|_| 0.5 + 0.5 * gauss().tanh()).collect())
        .collect();
    let raw = DMatrix::from_fn(d_b, d_a, |_, _| gauss());
    let mixing = if d_a == d_b {
        raw.qr().q()
    } else {
        raw / (d_a as f64).sqrt()
    };
    let mut data = Vec::with_capacity(n * (d_a + d_b));
    for &b in &blocks {
        let xa: Vec<f64> = centroids[b].iter().map(|c| c + spec.noise * gauss()).collect();
        data.extend(&xa);
        for k in 0..d_b {
            let v: f64 = (0..d_a).map(|j| mixing[(k, j)] * xa[j]).sum();
            data.push(v + spec.noise * gauss());
        }
    }
    let features = normalize_min_max(&Tensor2::new(n, d_a + d_b, data)?);
    Ok(SyntheticGraph {
        graph: PartyGraph::new((0..n as u64).collect(), &edges, features)?,
        partition: FeaturePartition {
            a_columns: (0..d_a).collect(),
            b_columns: (d_a..d_a + d_b).collect(),
        },
        blocks,
    })
}

/// Held-out link prediction at one co-occurrence probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub gamma: f64,
    pub test_pairs: usize,
    /// Full adjacency, raw features.
    pub raw_auc: f64,
    /// Cross-party adjacency block zeroed, raw features.
    pub joint_auc: f64,
    /// Cross-party block zeroed, perturbed features completed by the duals.
    pub mpdl_auc: f64,
    /// Mean squared error of the completed entries against the raw ones.
    pub completion_mse: f64,
}

/// Splits nodes by γ (no test share): A holds the co-occurrence and A-only
/// nodes, B the co-occurrence and B-only nodes, and each knows the edges
/// among its own nodes. A `holdout` share of the known edges becomes
/// positive test pairs, matched by as many sampled known non-edges. Scores
/// are cosine similarities of `M_rep` rows.
pub fn link_prediction(
    graph: &PartyGraph,
    partition: &FeaturePartition,
    gamma: f64,
    holdout: f64,
    config: &MpdlConfig,
) -> Result<LinkReport> {
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(Error::InvalidArgument(format!("holdout must be in (0, 1), got {holdout}")));
    }
    let n = graph.len();
    let seed = config.seed;
    let split = split_by_gamma(
        graph.ids(),
        &SplitSpec {
            gamma,
            test_fraction: 0.0,
            seed,
        },
    )?;
    let index: HashMap<u64, usize> = graph.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut has_a = vec![false; n];
    let mut has_b = vec![false; n];
    for id in split.co_occurrence.iter().chain(&split.a_only) {
        has_a[index[id]] = true;
    }
    for id in split.co_occurrence.iter().chain(&split.b_only) {
        has_b[index[id]] = true;
    }
    let known = |i: usize, j: usize| (has_a[i] && has_a[j]) || (has_b[i] && has_b[j]);

    // Held-out positives and matched negatives among known pairs.
    let mut r = rng::indexed_stream(seed, streams::GRAPH, 2);
    let all_edges = graph.edges();
    let mut known_edges: Vec<(usize, usize)> = all_edges.iter().copied().filter(|&(i, j)| known(i, j)).collect();
    known_edges.shuffle(&mut r);
    let n_test = ((known_edges.len() as f64 * holdout).floor() as usize).max(1);
    if known_edges.len() <= n_test {
        return Err(Error::Data(format!("{} known edges are too few to hold out", known_edges.len())));
    }
    let positives: HashSet<(usize, usize)> = known_edges[..n_test].iter().copied().collect();
    let mut negatives: HashSet<(usize, usize)> = HashSet::new();
    let mut attempts = 0usize;
    while negatives.len() < n_test {
        attempts += 1;
        if attempts > 1000 * n_test + 10_000 {
            return Err(Error::Data("too few known non-edges to sample negatives".into()));
        }
        let (i, j) = (r.gen_range(0..n), r.gen_range(0..n));
        let pair = (i.min(j), i.max(j));
        if i != j && known(i, j) && !graph.has_edge(i, j) {
            negatives.insert(pair);
        }
    }
    let mut pairs: Vec<(usize, usize)> = positives.iter().chain(&negatives).copied().collect();
    pairs.sort_unstable();
    let truth: Vec<bool> = pairs.iter().map(|p| positives.contains(p)).collect();

    let full = graph.with_edges(&all_edges.iter().copied().filter(|e| !positives.contains(e)).collect::<Vec<_>>())?;
    let incomplete = graph.with_edges(
        &all_edges
            .iter()
            .copied()
            .filter(|&(i, j)| known(i, j) && !positives.contains(&(i, j)))
            .collect::<Vec<_>>(),
    )?;
    let (raw_a, raw_b) = partition.split(graph.features())?;
    let raw = raw_a.hstack(&raw_b)?;
    let auc = |g: &PartyGraph, feat: &Tensor2| -> Result<f64> {
        link_auc(&cosine_scores(&g.representations(feat)?, &pairs), &truth)
    };

    // Dual pair on the co-occurrence nodes' features.
    let ids_of = |mask: &[bool]| -> Vec<u64> { (0..n).filter(|&i| mask[i]).map(|i| graph.ids()[i]).collect() };
    let rows_of = |mask: &[bool]| -> Vec<usize> { (0..n).filter(|&i| mask[i]).collect() };
    let view_a = PartyDataset::new(ids_of(&has_a), raw_a.select_rows(&rows_of(&has_a)), None)?;
    let view_b = PartyDataset::new(ids_of(&has_b), raw_b.select_rows(&rows_of(&has_b)), None)?;
    let fit = fit_duals(config, &view_a, &view_b, &split.co_occurrence)?;
    let place = |released: &Tensor2, mask: &[bool]| -> Tensor2 {
        let mut out = Tensor2::zeros(n, released.cols());
        for (k, i) in rows_of(mask).into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(released.row(k));
        }
        out
    };
    let x_a = place(fit.perturbed_a.released_rows(view_a.ids())?.as_tensor(), &has_a);
    let x_b = place(fit.perturbed_b.released_rows(view_b.ids())?.as_tensor(), &has_b);
    let completed = complete_feature_matrix(&fit.pair, &x_a, &has_a, &x_b, &has_b)?;

    let d_a = raw_a.cols();
    let (mut sq, mut count) = (0.0, 0usize);
    for i in 0..n {
        for j in 0..raw.cols() {
            let missing = if j < d_a { !has_a[i] } else { !has_b[i] };
            if missing {
                sq += (completed.get(i, j) - raw.get(i, j)).powi(2);
                count += 1;
            }
        }
    }

    Ok(LinkReport {
        gamma,
        test_pairs: pairs.len(),
        raw_auc: auc(&full, &raw)?,
        joint_auc: auc(&incomplete, &raw)?,
        mpdl_auc: auc(&incomplete, &completed)?,
        completion_mse: if count == 0 { f64::NAN } else { sq / count as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{in_process, transcript_assert, Predicate};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor2 {
        Tensor2::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_product(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn representations_of_identity_and_zero() {
        let mut r = rng::seeded(1);
        let feat = random_matrix(5, 3, &mut r);
        assert_eq!(node_representations(&Tensor2::identity(5), &feat).unwrap(), feat);
        assert_eq!(
            node_representations(&Tensor2::zeros(5, 5), &feat).unwrap(),
            Tensor2::zeros(5, 3)
        );
        assert!(node_representations(&Tensor2::zeros(5, 4), &feat).is_err());
    }

    #[test]
    fn representations_match_triple_loop() {
        let mut r = rng::seeded(2);
        let adj = Tensor2::new(20, 20, (0..400).map(|_| f64::from(u8::from(r.gen_bool(0.2)))).collect()).unwrap();
        let feat = random_matrix(20, 8, &mut r);
        let got = node_representations(&adj, &feat).unwrap();
        assert!(got.max_abs_diff(&naive_product(&adj, &feat)) < 1e-12);
    }

    #[test]
    fn sparse_representations_match_dense() {
        let g = sbm_graph(&SbmSpec {
            nodes: 40,
            ..SbmSpec::default()
        })
        .unwrap();
        let feat = g.graph.features();
        let dense = node_representations(&g.graph.adjacency(), feat).unwrap();
        assert!(g.graph.representations(feat).unwrap().max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn graph_is_symmetric_without_loops() {
        let g = PartyGraph::new(vec![10, 11, 12], &[(0, 1), (1, 0), (2, 2), (1, 2)], Tensor2::zeros(3, 1)).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert!(g.has_edge(1, 0) && g.has_edge(2, 1) && !g.has_edge(2, 2));
        let a = g.adjacency();
        assert_eq!(a, a.transpose());
        assert!(PartyGraph::new(vec![1, 2], &[(0, 2)], Tensor2::zeros(2, 1)).is_err());
        assert!(PartyGraph::new(vec![1, 1], &[], Tensor2::zeros(2, 1)).is_err());
    }

    #[test]
    fn edge_list_parsing() {
        let edges = parse_edge_list("# comment\n1 2\n\n3\t4\n").unwrap();
        assert_eq!(edges, vec![(1, 2), (3, 4)]);
        assert!(parse_edge_list("1 2 3\n").is_err());
        assert!(parse_edge_list("1 x\n").is_err());
        let g = PartyGraph::from_id_edges(vec![1, 2, 3, 4], &edges, Tensor2::zeros(4, 1)).unwrap();
        assert!(g.has_edge(2, 3));
        assert!(PartyGraph::from_id_edges(vec![1, 2], &edges, Tensor2::zeros(2, 1)).is_err());
    }

    #[test]
    fn identity_confusion_sends_m_b_directly() {
        let mut r = rng::seeded(3);
        let (m_a, m_b) = (random_matrix(4, 6, &mut r), random_matrix(6, 3, &mut r));
        let mut net = in_process();
        let got = confusion_protocol_with(&m_a, &m_b, &ConfusionMatrix::identity(3), &mut net).unwrap();
        assert_eq!(got, m_a.matmul(&m_b).unwrap());
        let t = net.transcript();
        assert_eq!(t.len(), 3);
        assert!(matches!(&t.messages()[1].payload, Payload::Matrix(x) if *x == m_b));
    }

    #[test]
    fn confusion_product_and_views() {
        let mut r = rng::seeded(4);
        for _ in 0..5 {
            let (m_a, m_b) = (random_matrix(50, 60, &mut r), random_matrix(60, 10, &mut r));
            let mut net = in_process();
            let got = confusion_protocol(&m_a, &m_b, &mut r, &mut net).unwrap();
            assert!(got.max_abs_diff(&m_a.matmul(&m_b).unwrap()) < 1e-8);
            let t = net.transcript();
            let report = transcript_assert(
                &t,
                &[
                    Predicate::NoRowsTo {
                        to: Actor::A,
                        label: "M_B".into(),
                        rows: m_b.clone(),
                    },
                    Predicate::NoRowsTo {
                        to: Actor::B,
                        label: "M_A".into(),
                        rows: m_a.clone(),
                    },
                ],
            )
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn b_view_is_rank_deficient() {
        let mut r = rng::seeded(5);
        let (m_a, m_b) = (random_matrix(50, 60, &mut r), random_matrix(60, 10, &mut r));
        let mc = ConfusionMatrix::random(10, &mut r).unwrap();
        let seen = m_a.matmul(&m_b).unwrap().matmul(mc.matrix()).unwrap();
        assert!(rank(&seen) <= 10);
        assert!(rank(&seen) < 60);
        assert_eq!(rank(&Tensor2::identity(7)), 7);
        assert_eq!(rank(&Tensor2::zeros(3, 4)), 0);
    }

    #[test]
    fn tall_party_a_is_refused() {
        let mut r = rng::seeded(6);
        let (m_a, m_b) = (random_matrix(6, 6, &mut r), random_matrix(6, 2, &mut r));
        let mut net = in_process();
        assert!(matches!(
            confusion_protocol(&m_a, &m_b, &mut r, &mut net),
            Err(Error::InvalidArgument(_))
        ));
        // B never sent its masked matrix.
        assert_eq!(net.transcript().count_kind(MessageKind::MatrixBlock), 0);
    }

    #[test]
    fn singular_confusion_rejected() {
        let singular = Tensor2::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(ConfusionMatrix::new(singular), Err(Error::Singular(_))));
        let ill = Tensor2::new(2, 2, vec![1.0, 0.0, 0.0, 1e-9]).unwrap();
        assert!(matches!(ConfusionMatrix::new(ill), Err(Error::Singular(_))));
        let mc = ConfusionMatrix::random(8, &mut rng::seeded(7)).unwrap();
        assert!(condition_number(mc.matrix()) < MAX_CONDITION);
        let eye = mc.matrix().matmul(mc.inverse()).unwrap();
        assert!(eye.max_abs_diff(&Tensor2::identity(8)) < 1e-10);
    }

    fn brute_auc(scores: &[f64], truth: &[bool]) -> f64 {
        let (mut s, mut pairs) = (0.0, 0.0);
        for (i, &p) in scores.iter().enumerate() {
            for (j, &q) in scores.iter().enumerate() {
                if truth[i] && !truth[j] {
                    pairs += 1.0;
                    if p > q {
                        s += 1.0;
                    } else if p == q {
                        s += 0.5;
                    }
                }
            }
        }
        s / pairs
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(link_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(link_auc(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]).unwrap(), 0.0);
        assert_eq!(link_auc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
        assert!(link_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(link_auc(&[0.1], &[true, false]).is_err());
        assert!(link_auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut r = rng::seeded(8);
        for _ in 0..200 {
            let n = r.gen_range(2..60);
            // Coarse scores force ties.
            let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..8u8)) / 4.0).collect();
            let mut truth: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
            truth[0] = true;
            truth[1] = false;
            assert_eq!(link_auc(&scores, &truth).unwrap(), brute_auc(&scores, &truth));
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(
            scores in prop::collection::vec(-5.0f64..5.0, 2..40),
            seed in any::<u64>(),
        ) {
            let mut r = rng::seeded(seed);
            let mut truth: Vec<bool> = scores.iter().map(|_| r.gen_bool(0.5)).collect();
            truth[0] = true;
            truth[1] = false;
            let base = link_auc(&scores, &truth).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(link_auc(&mapped, &truth).unwrap(), base);
        }
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    fn tiny_pair(rounds: u64) -> DualModelPair {
        let mut r = rng::seeded(9);
        DualModelPair {
            theta_ab: crate::nn::dual_network(2, 3, &mut r).unwrap(),
            theta_ba: crate::nn::dual_network(3, 2, &mut r).unwrap(),
            lambda_a: 0.0,
            lambda_b: 0.0,
            rounds,
        }
    }

    #[test]
    fn completion_without_gaps_is_concatenation() {
        let mut r = rng::seeded(10);
        let (xa, xb) = (random_matrix(4, 2, &mut r), random_matrix(4, 3, &mut r));
        let all = [true; 4];
        let out = complete_feature_matrix(&tiny_pair(1), &xa, &all, &xb, &all).unwrap();
        assert_eq!(out, xa.hstack(&xb).unwrap());
    }

    #[test]
    fn completion_fills_only_missing_rows() {
        let mut r = rng::seeded(11);
        let pair = tiny_pair(1);
        let (xa, xb) = (random_matrix(4, 2, &mut r), random_matrix(4, 3, &mut r));
        let has_a = [true, false, true, true];
        let has_b = [true, true, false, true];
        let out = complete_feature_matrix(&pair, &xa, &has_a, &xb, &has_b).unwrap();
        assert_eq!(out.shape(), (4, 5));
        for i in [0, 2, 3] {
            assert_eq!(&out.row(i)[..2], xa.row(i));
        }
        for i in [0, 1, 3] {
            assert_eq!(&out.row(i)[2..], xb.row(i));
        }
        let g = dual_infer(&pair.theta_ba, &xb.select_rows(&[1])).unwrap();
        assert_eq!(&out.row(1)[..2], g.row(0));
        assert!(complete_feature_matrix(&tiny_pair(0), &xa, &has_a, &xb, &has_b).is_err());
        assert!(complete_feature_matrix(&pair, &xa, &[false; 4], &xb, &[false; 4]).is_err());
    }

    #[test]
    fn sbm_is_deterministic_and_assortative() {
        let spec = SbmSpec::default();
        let a = sbm_graph(&spec).unwrap();
        let b = sbm_graph(&spec).unwrap();
        assert_eq!(a.graph, b.graph);
        let edges = a.graph.edges();
        let inside = edges.iter().filter(|&&(i, j)| a.blocks[i] == a.blocks[j]).count();
        assert!(inside * 2 > edges.len());
        let f = a.graph.features();
        assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
