use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{PartyDataset, Side};
use crate::error::{Error, Result};
use crate::nn::Tensor2;
use crate::rng::{self, streams};

/// Which original columns went to each party, in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePartition {
    pub a_columns: Vec<usize>,
    pub b_columns: Vec<usize>,
}

impl FeaturePartition {
    pub fn from_assignment(assignment: &[Side]) -> Result<Self> {
        let pick = |s| {
            assignment
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == s)
                .map(|(j, _)| j)
                .collect::<Vec<_>>()
        };
        let p = Self {
            a_columns: pick(Side::A),
            b_columns: pick(Side::B),
        };
        if p.a_columns.is_empty() || p.b_columns.is_empty() {
            return Err(Error::InvalidArgument("each party needs at least one column".into()));
        }
        Ok(p)
    }

    pub fn width(&self) -> usize {
        self.a_columns.len() + self.b_columns.len()
    }

    pub fn split(&self, x: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        if x.cols() != self.width() {
            return Err(Error::shape("FeaturePartition::split", self.width(), x.cols()));
        }
        Ok((x.select_cols(&self.a_columns), x.select_cols(&self.b_columns)))
    }

    /// Inverse of [`split`](Self::split): original column order.
    pub fn reassemble(&self, a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
        if a.cols() != self.a_columns.len() || b.cols() != self.b_columns.len() {
            return Err(Error::shape(
                "FeaturePartition::reassemble",
                format!("{}+{}", self.a_columns.len(), self.b_columns.len()),
                format!("{}+{}", a.cols(), b.cols()),
            ));
        }
        if a.rows() != b.rows() {
            return Err(Error::shape("FeaturePartition::reassemble rows", a.rows(), b.rows()));
        }
        let mut out = Tensor2::zeros(a.rows(), self.width());
        for i in 0..a.rows() {
            for (k, &j) in self.a_columns.iter().enumerate() {
                out.set(i, j, a.get(i, k));
            }
            for (k, &j) in self.b_columns.iter().enumerate() {
                out.set(i, j, b.get(i, k));
            }
        }
        Ok(out)
    }
}

/// Seeded random assignment of `width` columns, `⌈width/2⌉` to A.
pub fn random_assignment(width: usize, seed: u64) -> Vec<Side> {
    let mut cols: Vec<usize> = (0..width).collect();
    cols.shuffle(&mut rng::stream(seed, streams::FEATURE_SPLIT));
    let mut out = vec![Side::B; width];
    for &j in &cols[..width.div_ceil(2)] {
        out[j] = Side::A;
    }
    out
}

/// 28×28 image split: the bottom 18 rows (504 pixels) to A, the top 10 rows
/// (280 pixels) to B.
pub fn mnist_region_assignment() -> Vec<Side> {
    (0..28 * 28)
        .map(|p| if p / 28 >= 10 { Side::A } else { Side::B })
        .collect()
}

/// Column-disjoint split of a full table. Labels stay with B.
pub fn partition_features(
    ds: &PartyDataset,
    assignment: &[Side],
) -> Result<(PartyDataset, PartyDataset, FeaturePartition)> {
    if assignment.len() != ds.width() {
        return Err(Error::shape("partition_features", ds.width(), assignment.len()));
    }
    let p = FeaturePartition::from_assignment(assignment)?;
    let (fa, fb) = p.split(ds.features())?;
    let a = PartyDataset::new(ds.ids().to_vec(), fa, None)?;
    let b = PartyDataset::new(ds.ids().to_vec(), fb, ds.labels().map(<[usize]>::to_vec))?;
    Ok((a, b, p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub gamma: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(gamma: f64, seed: u64) -> Self {
        Self {
            gamma,
            test_fraction: 0.1,
            seed,
        }
    }
}

/// Sample partition controlled by the co-occurrence probability γ.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GammaSplit {
    /// Held by both parties.
    pub co_occurrence: Vec<u64>,
    /// Held by B only (with labels).
    pub b_only: Vec<u64>,
    /// Held by A only.
    pub a_only: Vec<u64>,
    /// Both feature sides and labels; evaluation only.
    pub test: Vec<u64>,
}

// Guards floors like ⌊100·0.8⌋ against 0.8 being stored as 0.7999….
const FLOOR_SLACK: f64 = 1e-9;

fn floor_count(x: f64) -> usize {
    (x + FLOOR_SLACK).floor() as usize
}

/// Shuffles `ids` by seed, carves `⌊N_total·test_fraction⌋` test rows, then
/// splits the remaining `N` rows into `⌊Nγ⌋` co-occurrence rows,
/// `⌊N(0.5 − γ/2)⌋` B-only rows and the rest A-only.
pub fn split_by_gamma(ids: &[u64], spec: &SplitSpec) -> Result<GammaSplit> {
    if !(spec.gamma > 0.0 && spec.gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must be in (0, 1), got {}", spec.gamma)));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must be in [0, 1), got {}",
            spec.test_fraction
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream(spec.seed, streams::SHUFFLE));
    let n_test = floor_count(ids.len() as f64 * spec.test_fraction);
    let (test, rest) = shuffled.split_at(n_test);
    let n = rest.len() as f64;
    let n_c = floor_count(n * spec.gamma);
    let n_b = floor_count(n * (0.5 - spec.gamma / 2.0));
    Ok(GammaSplit {
        co_occurrence: rest[..n_c].to_vec(),
        b_only: rest[n_c..n_c + n_b].to_vec(),
        a_only: rest[n_c + n_b..].to_vec(),
        test: test.to_vec(),
    })
}

/// Seeded split into `k` folds whose sizes differ by at most one; the first
/// `n mod k` folds take the extra element.
pub fn kfold_split(ids: &[u64], k: usize, seed: u64) -> Result<Vec<Vec<u64>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if k > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} available ids",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, streams::FOLDS));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(shuffled[start..start + size].to_vec());
        start += size;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_sizes() {
        let ids: Vec<u64> = (0..1000).collect();
        let spec = SplitSpec {
            gamma: 0.1,
            test_fraction: 0.0,
            seed: 1,
        };
        let s = split_by_gamma(&ids, &spec).unwrap();
        assert_eq!((s.co_occurrence.len(), s.b_only.len(), s.a_only.len()), (100, 450, 450));
        let s = split_by_gamma(&ids, &SplitSpec { gamma: 0.8, ..spec }).unwrap();
        assert_eq!((s.co_occurrence.len(), s.b_only.len(), s.a_only.len()), (800, 100, 100));
    }

    #[test]
    fn test_rows_carved_first() {
        let ids: Vec<u64> = (0..569).collect();
        let s = split_by_gamma(&ids, &SplitSpec::new(0.05, 3)).unwrap();
        assert_eq!(s.test.len(), 56);
        // N = 513: ⌊25.65⌋ = 25, ⌊243.675⌋ = 243, remainder 245.
        assert_eq!((s.co_occurrence.len(), s.b_only.len(), s.a_only.len()), (25, 243, 245));
    }

    #[test]
    fn gamma_out_of_range() {
        let ids: Vec<u64> = (0..10).collect();
        for g in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(split_by_gamma(&ids, &SplitSpec::new(g, 0)).is_err());
        }
    }

    #[test]
    fn seed_changes_membership_not_sizes() {
        let ids: Vec<u64> = (0..200).collect();
        let a = split_by_gamma(&ids, &SplitSpec::new(0.3, 1)).unwrap();
        let b = split_by_gamma(&ids, &SplitSpec::new(0.3, 2)).unwrap();
        assert_ne!(a.co_occurrence, b.co_occurrence);
        assert_eq!(a.co_occurrence.len(), b.co_occurrence.len());
        assert_eq!(a, split_by_gamma(&ids, &SplitSpec::new(0.3, 1)).unwrap());
    }

    #[test]
    fn fold_sizes() {
        let ten: Vec<u64> = (0..10).collect();
        let sizes: Vec<usize> = kfold_split(&ten, 5, 0).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2; 5]);
        let eleven: Vec<u64> = (0..11).collect();
        let sizes: Vec<usize> = kfold_split(&eleven, 5, 0).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        assert!(kfold_split(&ten, 11, 0).is_err());
        assert!(kfold_split(&ten, 1, 0).is_err());
    }

    #[test]
    fn region_assignment_widths() {
        let a = mnist_region_assignment();
        assert_eq!(a.iter().filter(|&&s| s == Side::A).count(), 504);
        assert_eq!(a.iter().filter(|&&s| s == Side::B).count(), 280);
        // Bottom-right pixel is A's, top-left is B's.
        assert_eq!(a[783], Side::A);
        assert_eq!(a[0], Side::B);
    }

    #[test]
    fn partition_roundtrip() {
        let x = Tensor2::new(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let ds = PartyDataset::new(vec![1, 2], x.clone(), Some(vec![0, 1])).unwrap();
        let assignment = random_assignment(4, 9);
        let (a, b, p) = partition_features(&ds, &assignment).unwrap();
        assert_eq!((a.width(), b.width()), (2, 2));
        assert!(a.labels().is_none());
        assert_eq!(b.labels().unwrap(), &[0, 1]);
        assert_eq!(p.reassemble(a.features(), b.features()).unwrap(), x);
        assert!(partition_features(&ds, &[Side::A; 4]).is_err());
    }
}
