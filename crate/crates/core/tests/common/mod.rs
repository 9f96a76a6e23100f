#![allow(dead_code)]

use std::sync::Arc;

use mpdl_core::data::{partition_features, synthetic, Side};
use mpdl_core::density::KdeModel;
use mpdl_core::dp::{perturb_dataset, DpConfig, SensitivityMode};
use mpdl_core::dual::{DualConfig, DualParty};
use mpdl_core::he::{keygen, KeyPair, TEST_KEY_BITS};
use mpdl_core::nn::dual_network;
use mpdl_core::rng::{self, streams};
use std::sync::OnceLock;

/// Two 512-bit key pairs shared by every test in a binary; keygen dominates
/// runtime otherwise.
pub fn test_keys() -> &'static (KeyPair, KeyPair) {
    static KEYS: OnceLock<(KeyPair, KeyPair)> = OnceLock::new();
    KEYS.get_or_init(|| {
        let a = keygen(TEST_KEY_BITS, &mut rng::stream(7, streams::KEYS_A)).unwrap();
        let b = keygen(TEST_KEY_BITS, &mut rng::stream(7, streams::KEYS_B)).unwrap();
        (a, b)
    })
}

/// Dual parties over a synthetic linear task with `n` aligned rows.
pub fn dual_parties(
    n: usize,
    d_a: usize,
    d_b: usize,
    epsilon: f64,
    cfg: &DualConfig,
    seed: u64,
) -> (DualParty, DualParty, Vec<u64>) {
    let task = synthetic::linear_task(n, d_a, d_b, 0.05, seed).unwrap();
    let assignment: Vec<Side> = (0..d_a + d_b)
        .map(|j| if j < d_a { Side::A } else { Side::B })
        .collect();
    let (a, b, _) = partition_features(&task.table, &assignment).unwrap();
    let dp = |w| DpConfig::new(epsilon, w, n, SensitivityMode::PerNeuron).unwrap();
    let pa = Arc::new(
        perturb_dataset(a.ids(), a.features(), &dp(8), &mut rng::stream(seed, streams::DP_A)).unwrap(),
    );
    let pb = Arc::new(
        perturb_dataset(b.ids(), b.features(), &dp(8), &mut rng::stream(seed, streams::DP_B)).unwrap(),
    );
    let (ka, kb) = test_keys();
    let f = dual_network(d_a, d_b, &mut rng::stream(seed, streams::DUAL_INIT_A)).unwrap();
    let g = dual_network(d_b, d_a, &mut rng::stream(seed, streams::DUAL_INIT_B)).unwrap();
    let kde_a = KdeModel::fit(pa.released().into_tensor()).unwrap();
    let kde_b = KdeModel::fit(pb.released().into_tensor()).unwrap();
    let party_a = DualParty::new(Side::A, f, pa, kde_a, ka.clone(), cfg.optimizer(), cfg, seed).unwrap();
    let party_b = DualParty::new(Side::B, g, pb, kde_b, kb.clone(), cfg.optimizer(), cfg, seed).unwrap();
    (party_a, party_b, a.ids().to_vec())
}

pub fn breast_cancer() -> mpdl_core::data::PartyDataset {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/breast_cancer.csv");
    mpdl_core::data::load_normalize(&path, &mpdl_core::data::CsvSchema::breast_cancer()).unwrap()
}
