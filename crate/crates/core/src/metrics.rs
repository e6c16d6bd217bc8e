//! Multi-label F1, count MSE and trivial baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// F1 scores on a 0–100 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

/// `2PR/(P+R)` from counts, 0 whenever a ratio is undefined.
fn f1_from_counts(tp: f64, fp: f64, fn_: f64) -> (f64, f64, f64) {
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

pub fn micro_macro_f1(y_true: &Tensor, y_pred: &Tensor) -> Result<F1Report> {
    if y_true.shape() != y_pred.shape() || y_true.ndim() != 2 {
        return Err(Error::shape("micro_macro_f1", y_true.shape(), y_pred.shape()));
    }
    let k = y_true.cols();
    let mut tp = vec![0.0; k];
    let mut fp = vec![0.0; k];
    let mut fn_ = vec![0.0; k];
    for (i, (&t, &p)) in y_true.data().iter().zip(y_pred.data()).enumerate() {
        let j = i % k;
        match (t != 0.0, p != 0.0) {
            (true, true) => tp[j] += 1.0,
            (false, true) => fp[j] += 1.0,
            (true, false) => fn_[j] += 1.0,
            (false, false) => {}
        }
    }
    let (mut precision, mut recall, mut f1) = (Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k));
    for j in 0..k {
        let (p, r, f) = f1_from_counts(tp[j], fp[j], fn_[j]);
        precision.push(100.0 * p);
        recall.push(100.0 * r);
        f1.push(100.0 * f);
    }
    let (_, _, micro) = f1_from_counts(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    Ok(F1Report {
        micro_f1: 100.0 * micro,
        macro_f1: f1.iter().sum::<f64>() / k as f64,
        precision,
        recall,
        f1,
    })
}

/// Mean squared error over every entry.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("mse", pred.shape(), truth.shape()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Column means of the training targets, repeated for `n` rows.
pub fn mean_predictor(train_y: &Tensor, n: usize) -> Tensor {
    let k = train_y.cols();
    let mut mean = vec![0.0; k];
    for row in train_y.data().chunks(k) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_y.rows() as f64);
    Tensor::from_parts(vec![n, k], mean.repeat(n))
}

/// Predicts the same label set for every row: labels positive in more than
/// half of the training rows, or the single most frequent label if none is.
pub fn most_frequent_labels(train_y: &Tensor, n: usize) -> Tensor {
    let k = train_y.cols();
    let freq = mean_predictor(train_y, 1).into_vec();
    let mut row: Vec<f64> = freq.iter().map(|f| if *f > 0.5 { 1.0 } else { 0.0 }).collect();
    if row.iter().all(|v| *v == 0.0) {
        let best = (0..k).fold(0, |b, j| if freq[j] > freq[b] { j } else { b });
        row[best] = 1.0;
    }
    Tensor::from_parts(vec![n, k], row.repeat(n))
}
