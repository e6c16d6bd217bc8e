//! Supervised variants: the code is (partly) observed as a label vector.
//!
//! * `Dis`: encoder and sparsity network only; the sampled code is fit to the labels.
//! * `Gen`: the full generative model with an extra label term on the code.
//! * `Con`: as `Gen`, but the code has `latent_extra` unobserved dimensions
//!   after the label dimensions.
//!
//! The count task reuses the discriminative networks with a squared-error fit
//! of the code to per-class counts.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Init, LatentNoise, ModelConfig, ModelParams};
use crate::numerics::{Tape, Tensor, Var};
use crate::objective::{self, ElboBreakdown, ObservationModel};
use crate::trainer::{self, FitLog, TrainConfig};

/// Clamp applied to the relaxed code before the label cross-entropy.
pub const LABEL_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    Dis,
    Gen,
    Con,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Dis" => Ok(Variant::Dis),
            "Gen" => Ok(Variant::Gen),
            "Con" => Ok(Variant::Con),
            other => Err(Error::Config(format!(
                "unknown variant `{other}`, expected one of Dis, Gen, Con"
            ))),
        }
    }
}

/// What to do with training rows that carry more than `L0` labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverBudget {
    /// Remove them before training.
    #[default]
    Drop,
    /// Refuse to train.
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub variant: Variant,
    /// Score threshold above which a label is predicted.
    pub threshold: f64,
    /// Unobserved code dimensions for `Con`; `None` means as many as there are labels.
    pub latent_extra: Option<usize>,
    pub label_loss_weight: f64,
    /// Likelihood of the features under the decoder (`Gen`/`Con`).
    pub observation: ObservationModel,
    pub over_budget: OverBudget,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dis,
            threshold: 0.2,
            latent_extra: None,
            label_loss_weight: 1.0,
            observation: ObservationModel::Gaussian,
            over_budget: OverBudget::Drop,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.latent_extra == Some(0) && self.variant == Variant::Con {
            return Err(Error::Config("latent_extra must be >= 1 for Con".into()));
        }
        if !(self.label_loss_weight >= 0.0) || !self.label_loss_weight.is_finite() {
            return Err(Error::Config("label_loss_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_decoder(&self) -> bool {
        self.variant != Variant::Dis
    }

    /// Code width for `n_labels` observed label dimensions.
    pub fn code_width(&self, n_labels: usize) -> usize {
        match self.variant {
            Variant::Con => n_labels + self.latent_extra.unwrap_or(n_labels),
            _ => n_labels,
        }
    }

    /// `base` with `k` and `d` set for this task.
    pub fn model_config(&self, base: &ModelConfig, n_labels: usize, d: usize) -> ModelConfig {
        ModelConfig {
            k: self.code_width(n_labels),
            d,
            alpha: Vec::new(),
            ..base.clone()
        }
    }
}

/// Rejects rows with more than `l0` positive (or counted) labels.
pub fn check_budget(y: &Tensor, l0: usize) -> Result<()> {
    for i in 0..y.rows() {
        let total: f64 = y.row(i).iter().sum();
        if total > l0 as f64 {
            return Err(Error::BudgetViolation {
                row: i,
                labels: total as usize,
                l0,
            });
        }
    }
    Ok(())
}

/// Keeps only rows within the budget; returns the filtered set and the number dropped.
pub fn filter_budget(dataset: &Dataset, l0: usize) -> Result<(Dataset, usize)> {
    let y = dataset.labels()?;
    let keep: Vec<usize> = (0..dataset.len())
        .filter(|&i| y.row(i).iter().sum::<f64>() <= l0 as f64)
        .collect();
    Ok((dataset.subset(&keep), dataset.len() - keep.len()))
}

/// Expected relaxed code per label, clamped: `min(1, L0 · λ · π_k)` for the
/// first `n_labels` categories.
pub fn label_scores(x: &Tensor, params: &ModelParams, model: &ModelConfig, n_labels: usize) -> Result<Tensor> {
    let expected = expected_code(x, params, model)?;
    Ok(expected.slice_cols(0, n_labels)?.map(|v| v.min(1.0)))
}

/// `L0 · λ_i · π_{i,k}` for every category.
pub fn expected_code(x: &Tensor, params: &ModelParams, model: &ModelConfig) -> Result<Tensor> {
    let vo = params.variational(x)?;
    let k = vo.log_pi.cols();
    let mut out = vo.log_pi.map(f64::exp);
    for (row, l) in out.data_mut().chunks_mut(k).zip(vo.lambda.data()) {
        row.iter_mut().for_each(|v| *v *= model.l0 as f64 * l);
    }
    Ok(out)
}

/// Thresholds scores at `k`; an empty row falls back to its highest score.
pub fn predict_labels(scores: &Tensor, k: f64) -> Tensor {
    let c = scores.cols();
    let mut out = scores.map(|s| if s >= k { 1.0 } else { 0.0 });
    for (pred, row) in out.data_mut().chunks_mut(c).zip(scores.data().chunks(c)) {
        if pred.iter().all(|v| *v == 0.0) {
            let best = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            pred[best] = 1.0;
        }
    }
    out
}

/// `round(L0 · λ · π)` clamped to `[0, L0]`.
pub fn predict_counts(x: &Tensor, params: &ModelParams, model: &ModelConfig) -> Result<Tensor> {
    let l0 = model.l0 as f64;
    Ok(expected_code(x, params, model)?.map(|v| v.round().clamp(0.0, l0)))
}

/// Batch-mean binary cross-entropy of `y` against the first `y.cols()` code
/// dimensions clamped to `(LABEL_EPS, 1 − LABEL_EPS)`.
pub fn label_term(tape: &mut Tape, code: Var, y: &Tensor) -> Result<Var> {
    let width = tape.value(code).cols();
    let n = y.cols();
    let code = if width == n { code } else { tape.slice_cols(code, 0, n)? };
    let c = tape.clamp(code, LABEL_EPS, 1.0 - LABEL_EPS);
    let one_minus = {
        let neg = tape.scale(c, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    let log_c = tape.ln(c)?;
    let log_1c = tape.ln(one_minus)?;
    let yv = tape.constant(y.clone());
    let ny = tape.constant(y.map(|v| 1.0 - v));
    let pos = tape.mul(yv, log_c)?;
    let neg = tape.mul(ny, log_1c)?;
    let ll = tape.add(pos, neg)?;
    let total = tape.sum(ll);
    Ok(tape.scale(total, -1.0 / y.rows() as f64))
}

fn check_labels(y: &Tensor, x: &Tensor, l0: usize, binary: bool) -> Result<()> {
    if y.rows() != x.rows() {
        return Err(Error::CountMismatch {
            images: x.rows(),
            labels: y.rows(),
        });
    }
    if binary {
        if let Some(v) = y.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::Domain(format!("labels must be 0 or 1, found {v}")));
        }
    } else if let Some(v) = y.data().iter().find(|v| !(**v >= 0.0) || v.fract() != 0.0) {
        return Err(Error::Domain(format!(
            "counts must be non-negative integers, found {v}"
        )));
    }
    check_budget(y, l0)
}

/// Samples codes for every noise block; returns the KL terms and the code nodes.
fn encode_and_sample(
    tape: &mut Tape,
    params: &ModelParams,
    model: &ModelConfig,
    x: &Tensor,
    noise: &[LatentNoise],
) -> Result<(Var, Var, Vec<Var>)> {
    let xv = tape.constant(x.clone());
    let (log_pi, log_lambda2) = objective::variational_on_tape(tape, params, xv)?;
    let codes = noise
        .iter()
        .map(|n| Ok(params.sample_code_on_tape(tape, log_pi, log_lambda2, n)?.code))
        .collect::<Result<Vec<_>>>()?;
    let (klg, klf) = objective::kl_on_tape(tape, model, log_pi, log_lambda2)?;
    Ok((klg, klf, codes))
}

fn mean_over_samples(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len() as f64;
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    Ok(tape.scale(acc, 1.0 / n))
}

fn assemble(tape: &mut Tape, fit: Var, klg: Var, klf: Var) -> Result<(Var, ElboBreakdown)> {
    let kl = tape.add(klg, klf)?;
    let loss = tape.add(fit, kl)?;
    let b = ElboBreakdown::new(-tape.scalar(fit), tape.scalar(klg), tape.scalar(klf));
    Ok((loss, b))
}

/// Label cross-entropy on the sampled code plus both KL terms. The breakdown's
/// `recon` holds the negated label term.
pub fn discriminative_loss(
    tape: &mut Tape,
    params: &ModelParams,
    model: &ModelConfig,
    x: &Tensor,
    y: &Tensor,
    noise: &[LatentNoise],
) -> Result<(Var, ElboBreakdown)> {
    check_labels(y, x, model.l0, true)?;
    let (klg, klf, codes) = encode_and_sample(tape, params, model, x, noise)?;
    let terms = codes
        .into_iter()
        .map(|c| label_term(tape, c, y))
        .collect::<Result<Vec<_>>>()?;
    let fit = mean_over_samples(tape, terms)?;
    assemble(tape, fit, klg, klf)
}

/// Negative ELBO of `x` plus `weight ·` the label term on the leading code
/// dimensions. Serves both `Gen` (code width = labels) and `Con` (wider code).
pub fn joint_loss(
    tape: &mut Tape,
    params: &ModelParams,
    model: &ModelConfig,
    sup: &SupervisedConfig,
    x: &Tensor,
    y: &Tensor,
    noise: &[LatentNoise],
) -> Result<(Var, ElboBreakdown)> {
    check_labels(y, x, model.l0, true)?;
    if y.cols() > model.k {
        return Err(Error::shape("joint_loss", y.shape(), &[y.rows(), model.k]));
    }
    let graph = objective::build_elbo(tape, params, model, sup.observation, x, noise)?;
    let terms = graph
        .samples
        .iter()
        .map(|s| label_term(tape, s.code, y))
        .collect::<Result<Vec<_>>>()?;
    let label = mean_over_samples(tape, terms)?;
    let weighted = tape.scale(label, sup.label_loss_weight);
    let loss = tape.add(graph.loss, weighted)?;
    Ok((loss, graph.breakdown(tape)))
}

pub fn generative_loss(
    tape: &mut Tape,
    params: &ModelParams,
    model: &ModelConfig,
    sup: &SupervisedConfig,
    x: &Tensor,
    y: &Tensor,
    noise: &[LatentNoise],
) -> Result<(Var, ElboBreakdown)> {
    if y.cols() != model.k {
        return Err(Error::shape("generative_loss", y.shape(), &[y.rows(), model.k]));
    }
    joint_loss(tape, params, model, sup, x, y, noise)
}

pub fn conditional_loss(
    tape: &mut Tape,
    params: &ModelParams,
    model: &ModelConfig,
    sup: &SupervisedConfig,
    x: &Tensor,
    y: &Tensor,
    noise: &[LatentNoise],
) -> Result<(Var, ElboBreakdown)> {
    if model.k <= y.cols() {
        return Err(Error::Config(format!(
            "conditional model needs unobserved code dimensions: k = {} with {} labels",
            model.k,
            y.cols()
        )));
    }
    joint_loss(tape, params, model, sup, x, y, noise)
}

/// `weight ·` squared error between the sampled code and the count vector,
/// plus both KL terms.
pub fn count_loss(
    tape: &mut Tape,
    params: &ModelParams,
    model: &ModelConfig,
    x: &Tensor,
    y: &Tensor,
    noise: &[LatentNoise],
    weight: f64,
) -> Result<(Var, ElboBreakdown)> {
    check_labels(y, x, model.l0, false)?;
    if y.cols() != model.k {
        return Err(Error::shape("count_loss", y.shape(), &[y.rows(), model.k]));
    }
    let (klg, klf, codes) = encode_and_sample(tape, params, model, x, noise)?;
    let yv = tape.constant(y.clone());
    let mut terms = Vec::with_capacity(codes.len());
    for c in codes {
        let diff = tape.sub(c, yv)?;
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        terms.push(tape.scale(s, weight / y.rows() as f64));
    }
    let fit = mean_over_samples(tape, terms)?;
    assemble(tape, fit, klg, klf)
}

/// Which supervised objective to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Multilabel,
    Counts,
}

/// Trains a supervised model on a labeled dataset whose rows already respect
/// the budget. `model` must already carry the task's `k` and `d`.
pub fn train_supervised(
    train: &Dataset,
    task: Task,
    model: &ModelConfig,
    sup: &SupervisedConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, FitLog)> {
    model.validate()?;
    sup.validate()?;
    let y = train.labels()?;
    if train.dim() != model.d {
        return Err(Error::shape(
            "train_supervised",
            train.x.shape(),
            &[train.len(), model.d],
        ));
    }
    let with_decoder = task == Task::Multilabel && sup.with_decoder();
    let mut params = ModelParams::new(model, with_decoder, Init::Glorot { seed: config.seed })?;
    let loss_fn = |tape: &mut Tape, p: &ModelParams, idx: &[usize], rng: &mut ChaCha8Rng| {
        let x = train.x.select_rows(idx);
        let yb = y.select_rows(idx);
        let noise = objective::sample_noise(rng, model, idx.len());
        match (task, sup.variant) {
            (Task::Counts, _) => count_loss(tape, p, model, &x, &yb, &noise, sup.label_loss_weight),
            (Task::Multilabel, Variant::Dis) => discriminative_loss(tape, p, model, &x, &yb, &noise),
            (Task::Multilabel, Variant::Gen) => generative_loss(tape, p, model, sup, &x, &yb, &noise),
            (Task::Multilabel, Variant::Con) => conditional_loss(tape, p, model, sup, &x, &yb, &noise),
        }
    };
    let log = trainer::fit(&mut params, config, train.len(), loss_fn, None)?;
    Ok((params, log))
}

/// CSV with a header: row id, one score column and one prediction column per label.
pub fn predictions_csv(scores: &Tensor, preds: &Tensor, names: &[String]) -> Result<String> {
    if scores.shape() != preds.shape() {
        return Err(Error::shape("predictions_csv", scores.shape(), preds.shape()));
    }
    let k = scores.cols();
    let name = |j: usize| names.get(j).cloned().unwrap_or_else(|| j.to_string());
    let mut out = String::from("row");
    for j in 0..k {
        out.push_str(&format!(",score_{}", name(j)));
    }
    for j in 0..k {
        out.push_str(&format!(",pred_{}", name(j)));
    }
    out.push('\n');
    for i in 0..scores.rows() {
        out.push_str(&i.to_string());
        for s in scores.row(i) {
            out.push_str(&format!(",{s}"));
        }
        for p in preds.row(i) {
            out.push_str(&format!(",{}", *p as u8));
        }
        out.push('\n');
    }
    Ok(out)
}
