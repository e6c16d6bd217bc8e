//! Datasets, preprocessing and minibatching.

mod arff;
mod composite;
mod idx;

pub use arff::{load_arff, parse_arff, LabelSpec};
pub use composite::{cells_contiguous, gen_composite_digits, CompositeSpec};
pub use idx::{
    load_counts, load_mnist_idx, read_idx_images, read_idx_labels, save_counts, write_atomic, write_idx_images,
    write_idx_labels, COUNTS_MAGIC, IMAGES_MAGIC, LABELS_MAGIC,
};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Observations with optional row-aligned targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N×D]`
    pub x: Tensor,
    /// `[N×K]` binary labels or counts.
    pub y: Option<Tensor>,
    pub label_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(x: Tensor, y: Option<Tensor>, split: Split) -> Result<Self> {
        if x.ndim() != 2 {
            return Err(Error::shape("dataset", x.shape(), &[x.rows(), x.cols()]));
        }
        if let Some(y) = &y {
            if y.ndim() != 2 || y.rows() != x.rows() {
                return Err(Error::CountMismatch {
                    images: x.rows(),
                    labels: y.rows(),
                });
            }
        }
        Ok(Self {
            x,
            y,
            label_names: Vec::new(),
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Targets, or a contract error when the dataset is unlabeled.
    pub fn labels(&self) -> Result<&Tensor> {
        self.y
            .as_ref()
            .ok_or_else(|| Error::Contract("dataset has no labels".into()))
    }

    /// The given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: self.y.as_ref().map(|y| y.select_rows(indices)),
            label_names: self.label_names.clone(),
            split: self.split,
        }
    }

    /// The first `n` rows (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Thresholds every entry at 0.5: `x ≥ 0.5 → 1`, otherwise 0.
pub fn binarize(dataset: &Dataset) -> Dataset {
    Dataset {
        x: dataset.x.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        ..dataset.clone()
    }
}

/// Per-column z-scoring with statistics from one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of each column; constant columns get std 1.
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.cols() != d {
            return Err(Error::shape("standardize", x.shape(), &[x.rows(), d]));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Endless permutation-based minibatches over `0..n`: each pass is a fresh
/// shuffle (or the identity order), and the last batch of a pass may be short.
#[derive(Clone, Debug)]
pub struct Batcher<R> {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    shuffle: bool,
    rng: R,
}

impl<R: Rng> Batcher<R> {
    pub fn new(n: usize, batch_size: usize, shuffle: bool, rng: R) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        Self {
            order: (0..n).collect(),
            pos: n,
            batch_size,
            shuffle,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        if self.pos >= self.order.len() {
            if self.shuffle {
                self.order.shuffle(&mut self.rng);
            }
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }

    /// The batches of one full pass.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let n = self.order.len();
        if self.pos < n {
            // finish the pass in progress first
            let mut rest = Vec::new();
            while self.pos < n {
                rest.push(self.next_batch());
            }
            return rest;
        }
        (0..n.div_ceil(self.batch_size)).map(|_| self.next_batch()).collect()
    }
}

/// One pass of minibatch row indices over a dataset.
pub fn batches<R: Rng>(dataset: &Dataset, batch_size: usize, shuffle: bool, rng: R) -> Vec<Vec<usize>> {
    Batcher::new(dataset.len(), batch_size, shuffle, rng).epoch()
}
