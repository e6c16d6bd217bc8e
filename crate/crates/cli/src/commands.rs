use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand_chacha::ChaCha8Rng;
use sdlgm_core::checkpoint::{Checkpoint, CheckpointMeta};
use sdlgm_core::data::{
    binarize, cells_contiguous, gen_composite_digits, load_arff, load_counts, load_mnist_idx, read_idx_images,
    save_counts, write_atomic, write_idx_images, Dataset, LabelSpec, Split, Standardizer,
};
use sdlgm_core::metrics::{self, F1Report};
use sdlgm_core::model::{Init, ModelConfig, ModelParams};
use sdlgm_core::numerics::Tensor;
use sdlgm_core::supervised::{self, OverBudget, Task};
use sdlgm_core::trainer::{self, stream_rng, FitLog, WindowReport};
use serde::Serialize;

use crate::config::RunConfig;
use crate::export;

/// Generator stream for post-training evaluation and dumps.
pub const STREAM_EVAL: u64 = 4;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_log(out: &Path, log: &FitLog) -> Result<()> {
    let path = out.join(METRICS_FILE);
    write_atomic(&path, log.to_jsonl().as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn eval_rng(cfg: &RunConfig) -> ChaCha8Rng {
    stream_rng(cfg.train.seed, STREAM_EVAL)
}

fn mnist_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let dir = cfg.data.resolve(&cfg.data.mnist_dir);
    let (images, labels, subset) = match split {
        Split::Train => (
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            cfg.data.train_subset,
        ),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", cfg.data.test_subset),
    };
    let mut ds = load_mnist_idx(&dir.join(images), &dir.join(labels))
        .with_context(|| format!("loading MNIST from {}", dir.display()))?;
    ds.split = split;
    Ok(match subset {
        Some(n) => ds.head(n),
        None => ds,
    })
}

/// Binarized MNIST split.
pub fn load_binary_mnist(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    Ok(binarize(&mnist_split(cfg, split)?))
}

#[derive(Debug, Serialize)]
pub struct UnsupSummary {
    pub iterations: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub windows: Vec<WindowReport>,
    /// Full held-out negative ELBO after training.
    pub test_neg_elbo: f64,
    pub tau: f64,
    pub tau_z: f64,
}

pub fn train_unsup(cfg: &RunConfig, out: &Path) -> Result<UnsupSummary> {
    let mut model = cfg.model.clone();
    let train = load_binary_mnist(cfg, Split::Train)?;
    let test = load_binary_mnist(cfg, Split::Test)?;
    if model.d != train.dim() {
        bail!("[model] d = {} but the images have {} pixels", model.d, train.dim());
    }
    model.alpha = model.alpha();
    let (params, log) = trainer::train(&train, Some(&test), &model, &cfg.train)?;
    let test_neg_elbo = trainer::evaluate_elbo(&test, &params, &model, &mut eval_rng(cfg), cfg.data.eval_passes)?;
    let summary = UnsupSummary {
        iterations: cfg.train.iterations,
        train_size: train.len(),
        test_size: test.len(),
        seed: cfg.train.seed,
        windows: log.windows.clone(),
        test_neg_elbo,
        tau: params.tau(),
        tau_z: params.tau_z(),
    };
    let ck = Checkpoint {
        model,
        meta: CheckpointMeta {
            task: "unsup".into(),
            with_decoder: true,
            seed: cfg.train.seed,
            label_names: train.label_names.clone(),
            ..CheckpointMeta::default()
        },
        params,
        standardizer: None,
    };
    ck.save(&out.join(CHECKPOINT_FILE))?;
    write_log(out, &log)?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn label_spec(cfg: &RunConfig) -> LabelSpec {
    if cfg.data.label_names.is_empty() {
        LabelSpec::Trailing(cfg.data.label_count)
    } else {
        LabelSpec::Names(cfg.data.label_names.clone())
    }
}

/// Train and test ARFF splits, z-scored with training statistics.
pub fn load_multilabel(cfg: &RunConfig) -> Result<(Dataset, Dataset, Standardizer)> {
    let spec = label_spec(cfg);
    let load = |rel: &Path| {
        let path = cfg.data.resolve(rel);
        load_arff(&path, &spec).with_context(|| format!("loading {}", path.display()))
    };
    let mut train = load(&cfg.data.arff_train)?;
    let mut test = load(&cfg.data.arff_test)?;
    if train.dim() != test.dim() || train.labels()?.cols() != test.labels()?.cols() {
        bail!("train and test ARFF files disagree on attributes");
    }
    test.split = Split::Test;
    let standardizer = Standardizer::fit(&train.x);
    train.x = standardizer.apply(&train.x)?;
    test.x = standardizer.apply(&test.x)?;
    Ok((train, test, standardizer))
}

#[derive(Debug, Serialize)]
pub struct MultilabelSummary {
    pub variant: supervised::Variant,
    pub threshold: f64,
    pub train_size: usize,
    pub dropped_over_budget: usize,
    pub test_size: usize,
    pub report: F1Report,
    pub baseline: F1Report,
}

/// Scores, thresholded predictions and F1 against the test labels.
pub fn score_multilabel(ck: &Checkpoint, test: &Dataset, threshold: f64) -> Result<(Tensor, Tensor, F1Report)> {
    let y = test.labels()?;
    let scores = supervised::label_scores(&test.x, &ck.params, &ck.model, y.cols())?;
    let preds = supervised::predict_labels(&scores, threshold);
    let report = metrics::micro_macro_f1(y, &preds)?;
    Ok((scores, preds, report))
}

pub fn train_multilabel(cfg: &RunConfig, out: &Path) -> Result<MultilabelSummary> {
    let sup = &cfg.supervised;
    let (train, test, standardizer) = load_multilabel(cfg)?;
    let n_labels = train.labels()?.cols();
    let model = sup.model_config(&cfg.model, n_labels, train.dim());
    model.validate().context("[model] after fitting to the dataset")?;
    let (train, dropped) = match sup.over_budget {
        OverBudget::Drop => supervised::filter_budget(&train, model.l0)?,
        OverBudget::Error => {
            supervised::check_budget(train.labels()?, model.l0)?;
            (train, 0)
        }
    };
    if dropped > 0 {
        eprintln!(
            "dropped {dropped} training rows with more than L0 = {} labels",
            model.l0
        );
    }
    let (params, log) = supervised::train_supervised(&train, Task::Multilabel, &model, sup, &cfg.train)?;
    let ck = Checkpoint {
        model,
        meta: CheckpointMeta {
            task: "multilabel".into(),
            supervised: Some(sup.clone()),
            n_labels: Some(n_labels),
            label_names: train.label_names.clone(),
            with_decoder: sup.with_decoder(),
            seed: cfg.train.seed,
        },
        params,
        standardizer: Some(standardizer),
    };
    let (scores, preds, report) = score_multilabel(&ck, &test, sup.threshold)?;
    let baseline = metrics::micro_macro_f1(
        test.labels()?,
        &metrics::most_frequent_labels(train.labels()?, test.len()),
    )?;
    let summary = MultilabelSummary {
        variant: sup.variant,
        threshold: sup.threshold,
        train_size: train.len(),
        dropped_over_budget: dropped,
        test_size: test.len(),
        report,
        baseline,
    };
    ck.save(&out.join(CHECKPOINT_FILE))?;
    write_log(out, &log)?;
    let csv = supervised::predictions_csv(&scores, &preds, &test.label_names)?;
    write_atomic(&out.join("predictions.csv"), csv.as_bytes())?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn composite_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    (
        dir.join(format!("{tag}-images-idx3-ubyte")),
        dir.join(format!("{tag}-counts")),
    )
}

fn to_bytes(x: &Tensor) -> Vec<u8> {
    x.data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[derive(Debug, Serialize)]
pub struct GenDataSummary {
    pub train: usize,
    pub test: usize,
    pub rows: usize,
    pub cols: usize,
    pub p_empty: f64,
    pub seed: u64,
}

/// Writes the composite count dataset (IDX images + count sidecar) into `out`.
/// Training strips use MNIST training digits, test strips use MNIST test digits.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<GenDataSummary> {
    let spec = &cfg.data.composite;
    for split in [Split::Train, Split::Test] {
        let source = mnist_split(cfg, split)?;
        let ds = gen_composite_digits(&source, spec, split)?;
        let (images, counts) = composite_paths(out, split);
        write_idx_images(&images, spec.cell, spec.cell * spec.columns, &to_bytes(&ds.x))?;
        save_counts(&counts, ds.labels()?)?;
    }
    let summary = GenDataSummary {
        train: spec.n_train,
        test: spec.n_test,
        rows: spec.cell,
        cols: spec.cell * spec.columns,
        p_empty: spec.p_empty,
        seed: spec.seed,
    };
    write_json(&out.join("composite.json"), &summary)?;
    Ok(summary)
}

/// Loads a generated composite split from `dir`.
pub fn load_composite(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, counts) = composite_paths(dir, split);
    let (n, rows, cols, pixels) = read_idx_images(&images).with_context(|| format!("loading {}", images.display()))?;
    let y = load_counts(&counts).with_context(|| format!("loading {}", counts.display()))?;
    let x = Tensor::new(
        vec![n, rows * cols],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let mut ds = Dataset::new(x, Some(y), split)?;
    ds.label_names = (0..ds.labels()?.cols()).map(|d| d.to_string()).collect();
    Ok(ds)
}

/// Count-task inputs: the composite split with every cell stored as one
/// contiguous pixel block.
pub fn count_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let dir = cfg.data.resolve(&cfg.data.composite_dir);
    let mut ds = if composite_paths(&dir, split).0.exists() {
        load_composite(&dir, split)?
    } else {
        eprintln!("{} not found; generating the count dataset in memory", dir.display());
        gen_composite_digits(&mnist_split(cfg, split)?, &cfg.data.composite, split)?
    };
    ds.x = cells_contiguous(&ds.x, &cfg.data.composite)?;
    Ok(ds)
}

#[derive(Debug, Serialize)]
pub struct CountsSummary {
    pub train_size: usize,
    pub test_size: usize,
    pub dropped_over_budget: usize,
    pub mse: f64,
    pub baseline_mse: f64,
}

pub fn count_model_config(cfg: &RunConfig, train: &Dataset) -> Result<ModelConfig> {
    let model = ModelConfig {
        k: train.labels()?.cols(),
        d: train.dim(),
        alpha: Vec::new(),
        ..cfg.model.clone()
    };
    model.validate().context("[model] after fitting to the dataset")?;
    Ok(model)
}

pub fn train_counts(cfg: &RunConfig, out: &Path) -> Result<CountsSummary> {
    let train = count_split(cfg, Split::Train)?;
    let test = count_split(cfg, Split::Test)?;
    let model = count_model_config(cfg, &train)?;
    let (train, dropped) = match cfg.supervised.over_budget {
        OverBudget::Drop => supervised::filter_budget(&train, model.l0)?,
        OverBudget::Error => (train, 0),
    };
    let (params, log) = supervised::train_supervised(&train, Task::Counts, &model, &cfg.supervised, &cfg.train)?;
    let pred = supervised::predict_counts(&test.x, &params, &model)?;
    let truth = test.labels()?;
    let summary = CountsSummary {
        train_size: train.len(),
        test_size: test.len(),
        dropped_over_budget: dropped,
        mse: metrics::mse(&pred, truth)?,
        baseline_mse: metrics::mse(&metrics::mean_predictor(train.labels()?, test.len()), truth)?,
    };
    let ck = Checkpoint {
        model,
        meta: CheckpointMeta {
            task: "counts".into(),
            supervised: Some(cfg.supervised.clone()),
            n_labels: Some(truth.cols()),
            label_names: train.label_names.clone(),
            with_decoder: false,
            seed: cfg.train.seed,
        },
        params,
        standardizer: None,
    };
    ck.save(&out.join(CHECKPOINT_FILE))?;
    write_log(out, &log)?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// The held-out data a checkpoint was trained for.
fn eval_data(cfg: &RunConfig, ck: &Checkpoint) -> Result<Dataset> {
    let ds = match ck.meta.task.as_str() {
        "unsup" => load_binary_mnist(cfg, Split::Test)?,
        "multilabel" => load_multilabel(cfg)?.1,
        "counts" => count_split(cfg, Split::Test)?,
        other => bail!("checkpoint has unknown task `{other}`"),
    };
    if ds.dim() != ck.model.d {
        bail!(
            "checkpoint expects {} input dimensions, data has {}",
            ck.model.d,
            ds.dim()
        );
    }
    Ok(ds)
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum EvalReport {
    Unsup { neg_elbo: f64, passes: usize },
    Multilabel { micro_f1: f64, macro_f1: f64 },
    Counts { mse: f64 },
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let test = eval_data(cfg, &ck)?;
    let report = match ck.meta.task.as_str() {
        "unsup" => EvalReport::Unsup {
            neg_elbo: trainer::evaluate_elbo(&test, &ck.params, &ck.model, &mut eval_rng(cfg), cfg.data.eval_passes)?,
            passes: cfg.data.eval_passes,
        },
        "multilabel" => {
            let threshold = ck
                .meta
                .supervised
                .as_ref()
                .map_or(cfg.supervised.threshold, |s| s.threshold);
            let (_, _, r) = score_multilabel(&ck, &test, threshold)?;
            EvalReport::Multilabel {
                micro_f1: r.micro_f1,
                macro_f1: r.macro_f1,
            }
        }
        _ => EvalReport::Counts {
            mse: metrics::mse(
                &supervised::predict_counts(&test.x, &ck.params, &ck.model)?,
                test.labels()?,
            )?,
        },
    };
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

/// Writes `reconstruct.pgm`: each row shows an original next to its reconstruction.
pub fn reconstruct(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let ck = load_checkpoint(checkpoint)?;
    if !ck.meta.with_decoder {
        bail!("checkpoint has no decoder; reconstruction needs a generative model");
    }
    let test = eval_data(cfg, &ck)?.head(cfg.data.reconstruct_rows);
    let beta = ck.params.reconstruct(&test.x, &ck.model, &mut eval_rng(cfg))?;
    let pgm = export::side_by_side_pgm(&test.x, &beta, cfg.data.image_width)?;
    let path = out.join("reconstruct.pgm");
    write_atomic(&path, pgm.as_bytes())?;
    Ok(path)
}

/// Writes `embed.csv`: one sampled code per observation with its gate probability
/// and rounded sparsity.
pub fn embed(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let ck = load_checkpoint(checkpoint)?;
    let test = eval_data(cfg, &ck)?.head(cfg.data.embed_rows);
    let vo = ck.params.variational(&test.x)?;
    let sample = ck.params.sample_code(&vo, &ck.model, &mut eval_rng(cfg))?;
    let csv = export::embedding_csv(&test, &sample, &vo.lambda)?;
    let path = out.join("embed.csv");
    write_atomic(&path, csv.as_bytes())?;
    Ok(path)
}

/// Untrained parameters for tests and smoke runs.
pub fn zero_checkpoint(model: &ModelConfig, task: &str) -> Result<Checkpoint> {
    Ok(Checkpoint {
        params: ModelParams::new(model, true, Init::Zeros)?,
        model: model.clone(),
        meta: CheckpointMeta {
            task: task.into(),
            with_decoder: true,
            ..CheckpointMeta::default()
        },
        standardizer: None,
    })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
