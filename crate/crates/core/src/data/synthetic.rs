//! Seeded synthetic tasks with a known cross-party relation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeaturePartition, PartyDataset};
use crate::error::{Error, Result};
use crate::nn::Tensor2;
use crate::rng::{self, streams};

/// Full table plus the column split between the parties.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    /// All columns, normalized to `[0, 1]`, labels attached.
    pub table: PartyDataset,
    pub partition: FeaturePartition,
    /// `d_B × d_A` map used to generate B's side before normalization.
    pub mixing: Tensor2,
}

/// `x^A ~ U[0,1]^{d_A}`, `x^B = M x^A + σ·N(0, I)`, label
/// `1[w·(x^A, x^B) > median]` with weights on every column. Columns are
/// min–max normalized afterwards, which keeps the A→B relation affine.
pub fn linear_task(n: usize, d_a: usize, d_b: usize, noise: f64, seed: u64) -> Result<SyntheticTask> {
    if n < 2 || d_a == 0 || d_b == 0 {
        return Err(Error::InvalidArgument("linear task needs n ≥ 2 and both widths ≥ 1".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be ≥ 0, got {noise}")));
    }
    let mut r = rng::stream(seed, streams::SYNTHETIC);
    let scale = 1.0 / (d_a as f64).sqrt();
    let mixing = Tensor2::new(
        d_b,
        d_a,
        (0..d_a * d_b).map(|_| r.gen_range(-1.0..1.0) * scale).collect(),
    )?;
    let xa = Tensor2::new(n, d_a, (0..n * d_a).map(|_| r.gen::<f64>()).collect())?;
    let mut xb = xa.matmul_transposed(&mixing)?;
    for v in xb.data_mut() {
        let z: f64 = StandardNormal.sample(&mut r);
        *v += noise * z;
    }
    let full = super::normalize_min_max(&xa.hstack(&xb)?);
    let w: Vec<f64> = (0..d_a + d_b)
        .map(|_| {
            let s: f64 = StandardNormal.sample(&mut r);
            s
        })
        .collect();
    let scores: Vec<f64> = full.iter_rows().map(|row| crate::nn::dot(row, &w)).collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[n / 2];
    let labels = scores.iter().map(|&s| usize::from(s >= median)).collect();
    let partition = FeaturePartition {
        a_columns: (0..d_a).collect(),
        b_columns: (d_a..d_a + d_b).collect(),
    };
    Ok(SyntheticTask {
        table: PartyDataset::new((0..n as u64).collect(), full, Some(labels))?,
        partition,
        mixing,
    })
}
