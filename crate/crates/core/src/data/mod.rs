//! Datasets, vertical partitions, sample splits and entity alignment.

mod load;
mod psi;
mod split;
pub mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor2;

pub use load::{
    breast_cancer, load_csv, load_idx_images, load_idx_labels, load_normalize, normalize_min_max, parse_csv, CsvSchema,
    LoadedTable, BREAST_CANCER_CSV,
};
pub use psi::{blinded_intersection, run_blinded_intersection, AlignmentOutcome, RsaBlindKey};
pub use split::{
    kfold_split, mnist_region_assignment, partition_features, random_assignment, split_by_gamma,
    FeaturePartition, GammaSplit, SplitSpec,
};

/// The two data-holding parties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

/// One party's ID-indexed features in `[0, 1]`, with labels when held.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyDataset {
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    features: Tensor2,
    labels: Option<Vec<usize>>,
}

impl PartyDataset {
    pub fn new(ids: Vec<u64>, features: Tensor2, labels: Option<Vec<usize>>) -> Result<Self> {
        if ids.len() != features.rows() {
            return Err(Error::shape("PartyDataset ids", features.rows(), ids.len()));
        }
        if let Some(l) = &labels {
            if l.len() != ids.len() {
                return Err(Error::shape("PartyDataset labels", ids.len(), l.len()));
            }
        }
        if let Some(bad) = features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("feature value {bad} outside [0, 1]")));
        }
        let index: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if index.len() != ids.len() {
            return Err(Error::Data("duplicate sample ids".into()));
        }
        Ok(Self {
            ids,
            index,
            features,
            labels,
        })
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Number of classes implied by the labels (max label + 1).
    pub fn classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    fn rows_for(&self, ids: &[u64]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.row_of(*id)
                    .ok_or_else(|| Error::Data(format!("id {id} not in dataset")))
            })
            .collect()
    }

    /// Sub-dataset with the given ids, in the given order.
    pub fn select_ids(&self, ids: &[u64]) -> Result<PartyDataset> {
        let rows = self.rows_for(ids)?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r]).collect());
        PartyDataset::new(ids.to_vec(), self.features.select_rows(&rows), labels)
    }

    pub fn labels_for(&self, ids: &[u64]) -> Result<Vec<usize>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("dataset holds no labels".into()))?;
        Ok(self.rows_for(ids)?.into_iter().map(|r| labels[r]).collect())
    }

    pub fn without_labels(&self) -> PartyDataset {
        PartyDataset {
            labels: None,
            ..self.clone()
        }
    }
}
