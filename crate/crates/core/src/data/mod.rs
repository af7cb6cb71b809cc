//! Datasets: synthetic Gaussian blobs, IDX ingestion, holdout and non-IID splits.

mod blobs;
pub mod idx;
mod partition;

pub use blobs::generate_blobs;
pub use idx::load_idx;
pub use partition::{
    label_counts_for, partition, partition_by_label_counts, partition_indices, PartitionKind,
    PartitionSpec,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Labelled feature matrix; one row per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::ContractViolation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Samples at `indices` (duplicates allowed), in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InsufficientData("empty subset".into()));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dimension(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Self::new(DenseMatrix::new(indices.len(), d, data)?, labels, self.classes)
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.classes];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }

    /// Number of classes that actually occur.
    pub fn distinct_labels(&self) -> usize {
        self.class_counts().iter().filter(|&&c| c > 0).count()
    }
}

/// Stratified `(train, test)` index split.
pub fn holdout_indices(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(
            "test_fraction",
            format!("{test_fraction} not in (0, 1)"),
        ));
    }
    let mut rng = rng::stream(seed, Purpose::Holdout, 0, 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut idx in ds.class_indices() {
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "holdout of {} samples at fraction {test_fraction} leaves an empty side",
            ds.len()
        )));
    }
    Ok((train, test))
}

/// Stratified holdout split, deterministic per seed.
pub fn holdout_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = holdout_indices(ds, test_fraction, seed)?;
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}
