//! Feature-oriented differential privacy.
//!
//! Each party pushes its normalized features once through a Laplace
//! perturbation before anything leaves its boundary. The noise added to an
//! entry is `(1/L)·Lap(Δ/ε)`, i.e. Laplace with scale `Δ/(L·ε)`, where the
//! global sensitivity is bounded by `Δ ≤ 2·|h0|·L` for inputs in `[0, 1]`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PartyDataset;
use crate::error::{Error, Result};
use crate::nn::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    /// `Δ = 2·|h0|·L`: every neuron of the perturbed layer is accounted.
    PerLayer,
    /// `Δ = 2·L`: single-neuron accounting.
    PerNeuron,
}

impl std::str::FromStr for SensitivityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_layer" | "per-layer" => Ok(Self::PerLayer),
            "per_neuron" | "per-neuron" => Ok(Self::PerNeuron),
            other => Err(Error::InvalidArgument(format!("unknown sensitivity mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SensitivityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerLayer => "per_layer",
            Self::PerNeuron => "per_neuron",
        })
    }
}

/// Privacy budget and accounting for one party's perturbed layer.
///
/// `epsilon = +∞` switches the noise off (the non-private baseline).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon: f64,
    pub h0_width: usize,
    pub sample_count: usize,
    pub sensitivity_mode: SensitivityMode,
}

impl DpConfig {
    pub fn new(
        epsilon: f64,
        h0_width: usize,
        sample_count: usize,
        sensitivity_mode: SensitivityMode,
    ) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
        }
        if h0_width == 0 || sample_count == 0 {
            return Err(Error::InvalidArgument(
                "h0_width and sample_count must be at least 1".into(),
            ));
        }
        Ok(Self {
            epsilon,
            h0_width,
            sample_count,
            sensitivity_mode,
        })
    }

    /// Configuration with noise disabled.
    pub fn disabled(h0_width: usize, sample_count: usize) -> Self {
        Self {
            epsilon: f64::INFINITY,
            h0_width: h0_width.max(1),
            sample_count: sample_count.max(1),
            sensitivity_mode: SensitivityMode::PerNeuron,
        }
    }

    pub fn noise_enabled(&self) -> bool {
        self.epsilon.is_finite()
    }

    /// Global sensitivity bound of the perturbed layer.
    pub fn sensitivity(&self) -> f64 {
        sensitivity(self)
    }

    /// Per-entry Laplace scale `Δ/(L·ε)`; zero when noise is off.
    pub fn effective_scale(&self) -> f64 {
        if !self.noise_enabled() {
            return 0.0;
        }
        self.sensitivity() / (self.sample_count as f64 * self.epsilon)
    }
}

pub fn sensitivity(config: &DpConfig) -> f64 {
    let l = config.sample_count as f64;
    match config.sensitivity_mode {
        SensitivityMode::PerLayer => 2.0 * config.h0_width as f64 * l,
        SensitivityMode::PerNeuron => 2.0 * l,
    }
}

/// Inverse-CDF transform of `u ∈ (−½, ½)` into a zero-mean Laplace draw.
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    if u == 0.0 {
        return 0.0;
    }
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

pub fn laplace_sample<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("Laplace scale must be positive, got {scale}")));
    }
    // u uniform on the open interval (−½, ½).
    let u = loop {
        let v: f64 = rng.gen();
        if v > 0.0 {
            break v - 0.5;
        }
    };
    Ok(laplace_from_uniform(u, scale))
}

/// CDF of the zero-mean Laplace distribution.
pub fn laplace_cdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / scale).exp()
    } else {
        1.0 - 0.5 * (-x / scale).exp()
    }
}

/// A party's features after the one-shot perturbation, with the noise
/// retained for audit.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedDataset {
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    features: Tensor2,
    config: DpConfig,
    noise: Tensor2,
}

impl PerturbedDataset {
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn config(&self) -> &DpConfig {
        &self.config
    }

    /// Noise draws, same shape as the features. Audit use only.
    pub fn noise(&self) -> &Tensor2 {
        &self.noise
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// All perturbed rows.
    pub fn released(&self) -> ReleasedFeatures {
        ReleasedFeatures(self.features.clone())
    }

    /// Perturbed rows for `ids`, in order.
    pub fn released_rows(&self, ids: &[u64]) -> Result<ReleasedFeatures> {
        let rows = ids
            .iter()
            .map(|id| {
                self.row_of(*id)
                    .ok_or_else(|| Error::Data(format!("id {id} not held by this party")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ReleasedFeatures(self.features.select_rows(&rows)))
    }

    /// Writes `sample_id,feature_index,noise` rows.
    pub fn write_noise_audit(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "sample_id,feature_index,noise")?;
        for (r, id) in self.ids.iter().enumerate() {
            for (j, v) in self.noise.row(r).iter().enumerate() {
                writeln!(out, "{id},{j},{v:e}")?;
            }
        }
        Ok(())
    }
}

/// Features that may cross a party boundary: perturbed rows or rows
/// inferred by a dual model from perturbed rows. Raw features cannot be
/// turned into this type.
#[derive(Clone, Debug, PartialEq)]
pub struct ReleasedFeatures(Tensor2);

impl ReleasedFeatures {
    pub(crate) fn from_inference(t: Tensor2) -> Self {
        Self(t)
    }

    pub fn as_tensor(&self) -> &Tensor2 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor2 {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self(self.0.select_rows(idx))
    }

    pub fn vstack(&self, other: &ReleasedFeatures) -> Result<Self> {
        Ok(Self(self.0.vstack(&other.0)?))
    }
}

/// Adds `(1/L)·Lap(Δ/ε)` noise to every entry, drawn i.i.d. in row-major
/// order. Perturbed values are not clamped back into `[0, 1]`.
pub fn perturb_dataset<R: Rng + ?Sized>(
    ids: &[u64],
    features: &Tensor2,
    config: &DpConfig,
    rng: &mut R,
) -> Result<PerturbedDataset> {
    if ids.len() != features.rows() {
        return Err(Error::shape("perturb_dataset ids", features.rows(), ids.len()));
    }
    if let Some(bad) = features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!(
            "feature value {bad} outside [0, 1]; normalize before perturbing"
        )));
    }
    let scale = config.effective_scale();
    let noise = if config.noise_enabled() {
        let draws = (0..features.data().len())
            .map(|_| laplace_sample(scale, rng))
            .collect::<Result<Vec<_>>>()?;
        Tensor2::from_raw(features.rows(), features.cols(), draws)
    } else {
        Tensor2::zeros(features.rows(), features.cols())
    };
    let perturbed = features.add(&noise)?;
    let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect::<HashMap<_, _>>();
    if index.len() != ids.len() {
        return Err(Error::Data("duplicate ids in perturbed dataset".into()));
    }
    Ok(PerturbedDataset {
        ids: ids.to_vec(),
        index,
        features: perturbed,
        config: *config,
        noise,
    })
}

/// Run-scoped store guaranteeing that a dataset is perturbed at most once.
///
/// Re-perturbing with fresh noise would let an observer average the noise
/// away, so repeated requests return the first result.
#[derive(Debug, Default)]
pub struct PerturbationCache {
    entries: HashMap<[u8; 32], Arc<PerturbedDataset>>,
}

impl PerturbationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_perturb<R: Rng + ?Sized>(
        &mut self,
        dataset: &PartyDataset,
        config: &DpConfig,
        rng: &mut R,
    ) -> Result<Arc<PerturbedDataset>> {
        let key = fingerprint(dataset);
        if let Some(hit) = self.entries.get(&key) {
            return Ok(Arc::clone(hit));
        }
        let perturbed = Arc::new(perturb_dataset(dataset.ids(), dataset.features(), config, rng)?);
        self.entries.insert(key, Arc::clone(&perturbed));
        Ok(perturbed)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn fingerprint(dataset: &PartyDataset) -> [u8; 32] {
    let mut h = Sha256::new();
    for id in dataset.ids() {
        h.update(id.to_le_bytes());
    }
    h.update((dataset.features().cols() as u64).to_le_bytes());
    for v in dataset.features().data() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn sensitivity_bounds() {
        let c = DpConfig::new(1.0, 10, 100, SensitivityMode::PerLayer).unwrap();
        assert_eq!(sensitivity(&c), 2000.0);
        let c = DpConfig::new(1.0, 10, 100, SensitivityMode::PerNeuron).unwrap();
        assert_eq!(sensitivity(&c), 200.0);
        let c = DpConfig::new(1.0, 1, 1, SensitivityMode::PerLayer).unwrap();
        assert_eq!(sensitivity(&c), 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(DpConfig::new(0.0, 1, 1, SensitivityMode::PerLayer).is_err());
        assert!(DpConfig::new(-1.0, 1, 1, SensitivityMode::PerLayer).is_err());
        assert!(DpConfig::new(1.0, 0, 1, SensitivityMode::PerLayer).is_err());
        assert!(DpConfig::new(1.0, 1, 0, SensitivityMode::PerLayer).is_err());
        assert!(DpConfig::new(f64::INFINITY, 1, 1, SensitivityMode::PerLayer).is_ok());
    }

    #[test]
    fn per_neuron_scale_is_independent_of_sample_count() {
        for l in [1, 7, 100, 5000] {
            let c = DpConfig::new(0.5, 12, l, SensitivityMode::PerNeuron).unwrap();
            assert!((c.effective_scale() - 4.0).abs() < 1e-12);
            let c = DpConfig::new(0.5, 12, l, SensitivityMode::PerLayer).unwrap();
            assert!((c.effective_scale() - 48.0).abs() < 1e-9);
        }
    }

    #[test]
    fn median_draw_is_zero() {
        assert_eq!(laplace_from_uniform(0.0, 3.0), 0.0);
    }

    #[test]
    fn nonpositive_scale_rejected() {
        let mut r = rng::seeded(0);
        assert!(laplace_sample(0.0, &mut r).is_err());
        assert!(laplace_sample(-1.0, &mut r).is_err());
    }

    #[test]
    fn empirical_moments() {
        let mut r = rng::seeded(11);
        let n = 100_000;
        let s = 1.7;
        let draws: Vec<f64> = (0..n).map(|_| laplace_sample(s, &mut r).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        // 3σ of the sample mean at scale 1 is 3·√2/√n ≈ 0.0134.
        assert!(mean.abs() < 0.02 * s, "mean {mean}");
        assert!((var - 2.0 * s * s).abs() < 0.05 * 2.0 * s * s, "var {var}");
    }

    #[test]
    fn disabled_noise_is_identity() {
        let x = Tensor2::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let mut r = rng::seeded(3);
        let p = perturb_dataset(&[7, 9], &x, &DpConfig::disabled(4, 2), &mut r).unwrap();
        assert_eq!(p.released().as_tensor(), &x);
        assert_eq!(p.released_rows(&[9]).unwrap().as_tensor().data(), &[0.5, 1.0]);
    }

    #[test]
    fn out_of_range_features_rejected() {
        let x = Tensor2::new(1, 2, vec![0.5, 1.5]).unwrap();
        let mut r = rng::seeded(3);
        let c = DpConfig::new(1.0, 1, 1, SensitivityMode::PerNeuron).unwrap();
        assert!(matches!(perturb_dataset(&[1], &x, &c, &mut r), Err(Error::Data(_))));
    }

    #[test]
    fn perturbation_is_not_reclamped() {
        let x = Tensor2::filled(50, 4, 1.0);
        let ids: Vec<u64> = (0..50).collect();
        let mut r = rng::seeded(5);
        let c = DpConfig::new(1.0, 1, 50, SensitivityMode::PerNeuron).unwrap();
        let p = perturb_dataset(&ids, &x, &c, &mut r).unwrap();
        assert!(p.released().as_tensor().data().iter().any(|&v| v > 1.0));
        let diff = p.released().as_tensor().sub(&x).unwrap();
        assert!(diff.max_abs_diff(p.noise()) < 1e-12);
    }

    #[test]
    fn cache_never_resamples() {
        let x = Tensor2::filled(3, 2, 0.5);
        let ds = PartyDataset::new(vec![1, 2, 3], x, None).unwrap();
        let c = DpConfig::new(1.0, 1, 3, SensitivityMode::PerNeuron).unwrap();
        let mut cache = PerturbationCache::new();
        let mut r = rng::seeded(8);
        let first = cache.get_or_perturb(&ds, &c, &mut r).unwrap();
        let second = cache.get_or_perturb(&ds, &c, &mut r).unwrap();
        assert!(Arc::ptr_eq(&first, &second));
        assert_eq!(cache.len(), 1);
    }
}
