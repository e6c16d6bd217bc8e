//! Minibatch amortized variational inference with Adam.
//!
//! Randomness is split into independent ChaCha streams derived from one seed:
//! weight init, minibatch order, training noise and held-out probing each get
//! their own, so adding a probe never perturbs the training trajectory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batcher, Dataset};
use crate::error::{Error, Result};
use crate::model::{Init, ModelConfig, ModelParams};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::objective::{self, ElboBreakdown, ObservationModel};

pub const STREAM_BATCHES: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
pub const STREAM_PROBE: u64 = 3;

/// A ChaCha generator on stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Held-out evaluation period in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Trailing window for reported ELBO averages.
    pub elbo_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 2_000,
            elbo_window: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.elbo_window == 0 {
            return bad("elbo_window must be >= 1".into());
        }
        Ok(())
    }
}

/// Adam moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step against the gradients held in `store`.
/// Frozen parameters are left untouched, moments included.
pub fn adam_update(store: &mut ParamStore, state: &mut OptimizerState, config: &TrainConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape("adam_update", &[state.m.len()], &[store.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if p.grad.shape() != m.shape() || p.value.shape() != m.shape() {
            return Err(Error::shape("adam_update", p.value.shape(), m.shape()));
        }
        if !p.trainable {
            continue;
        }
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        let value = p.value.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            value[i] -= config.learning_rate * mhat / (vhat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Records `loss_fn` on a fresh tape, backpropagates and applies one Adam step.
pub fn step_with<F>(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
    loss_fn: F,
) -> Result<ElboBreakdown>
where
    F: FnOnce(&mut Tape, &ModelParams) -> Result<(Var, ElboBreakdown)>,
{
    let mut tape = Tape::new();
    let (loss, breakdown) = loss_fn(&mut tape, params)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Domain(format!(
            "non-finite loss at optimizer step {}",
            state.step + 1
        )));
    }
    tape.backward(loss, &mut params.store)?;
    adam_update(&mut params.store, state, config)?;
    Ok(breakdown)
}

/// One unsupervised step on a binary batch.
pub fn train_step<R: rand::Rng + ?Sized>(
    batch: &Tensor,
    params: &mut ModelParams,
    state: &mut OptimizerState,
    model: &ModelConfig,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<ElboBreakdown> {
    step_with(params, state, config, |tape, p| {
        objective::negative_elbo(tape, p, model, batch, rng)
    })
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub recon: f64,
    pub kl_g: f64,
    pub kl_f: f64,
    pub neg_elbo: f64,
}

impl IterRecord {
    pub fn new(iter: usize, b: &ElboBreakdown) -> Self {
        Self {
            iter,
            recon: b.recon,
            kl_g: b.kl_gates,
            kl_f: b.kl_features,
            neg_elbo: b.neg_elbo(),
        }
    }
}

/// Trailing-window averages at an evaluation point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    /// Number of completed iterations.
    pub iter: usize,
    pub train_neg_elbo: f64,
    /// Mean held-out objective over one probe minibatch per window iteration.
    pub test_neg_elbo: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct FitLog {
    pub records: Vec<IterRecord>,
    pub windows: Vec<WindowReport>,
}

impl FitLog {
    pub fn last_window(&self) -> Option<&WindowReport> {
        self.windows.last()
    }

    /// One JSON object per iteration.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain numeric record"));
            out.push('\n');
        }
        out
    }
}

/// Held-out probe: evaluates one minibatch without touching the parameters.
pub type Probe<'a> = dyn FnMut(&ModelParams, &mut ChaCha8Rng) -> Result<f64> + 'a;

fn is_report_point(iter: usize, config: &TrainConfig) -> bool {
    iter == config.iterations || (config.eval_every > 0 && iter.is_multiple_of(config.eval_every))
}

/// Is iteration `i` (0-based) inside the trailing window of some report point?
fn in_window(i: usize, config: &TrainConfig) -> bool {
    let done = i + 1;
    let next_report = if config.eval_every == 0 {
        config.iterations
    } else {
        done.div_ceil(config.eval_every)
            .saturating_mul(config.eval_every)
            .min(config.iterations)
    };
    next_report - done < config.elbo_window
}

/// The generic training loop. `loss_fn` receives the tape, the current
/// parameters, the minibatch row indices and the noise generator.
pub fn fit<F>(
    params: &mut ModelParams,
    config: &TrainConfig,
    n: usize,
    mut loss_fn: F,
    mut probe: Option<&mut Probe<'_>>,
) -> Result<FitLog>
where
    F: FnMut(&mut Tape, &ModelParams, &[usize], &mut ChaCha8Rng) -> Result<(Var, ElboBreakdown)>,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut state = OptimizerState::new(&params.store);
    let mut batcher = Batcher::new(n, config.batch_size, true, stream_rng(config.seed, STREAM_BATCHES));
    let mut noise_rng = stream_rng(config.seed, STREAM_NOISE);
    let mut probe_rng = stream_rng(config.seed, STREAM_PROBE);
    let mut log = FitLog::default();
    let mut probe_values = Vec::new();
    for i in 0..config.iterations {
        let idx = batcher.next_batch();
        let b = step_with(params, &mut state, config, |tape, p| {
            loss_fn(tape, p, &idx, &mut noise_rng)
        })?;
        log.records.push(IterRecord::new(i, &b));
        if in_window(i, config) {
            if let Some(probe) = probe.as_deref_mut() {
                probe_values.push(probe(params, &mut probe_rng)?);
            }
        }
        let done = i + 1;
        if is_report_point(done, config) {
            let start = done.saturating_sub(config.elbo_window);
            let window = &log.records[start..done];
            let train = window.iter().map(|r| r.neg_elbo).sum::<f64>() / window.len() as f64;
            let test = (!probe_values.is_empty()).then(|| probe_values.iter().sum::<f64>() / probe_values.len() as f64);
            probe_values.clear();
            log.windows.push(WindowReport {
                iter: done,
                train_neg_elbo: train,
                test_neg_elbo: test,
            });
        }
    }
    Ok(log)
}

/// Unsupervised training on a binary dataset, with an optional held-out set
/// probed during the trailing windows.
pub fn train(
    dataset: &Dataset,
    test: Option<&Dataset>,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, FitLog)> {
    model.validate()?;
    let mut params = ModelParams::new(model, true, Init::Glorot { seed: config.seed })?;
    let log = train_from(&mut params, dataset, test, model, config)?;
    Ok((params, log))
}

/// As [`train`], continuing from given parameters.
pub fn train_from(
    params: &mut ModelParams,
    dataset: &Dataset,
    test: Option<&Dataset>,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<FitLog> {
    if dataset.x.cols() != model.d {
        return Err(Error::shape("train", dataset.x.shape(), &[dataset.len(), model.d]));
    }
    let loss_fn = |tape: &mut Tape, p: &ModelParams, idx: &[usize], rng: &mut ChaCha8Rng| {
        let batch = dataset.x.select_rows(idx);
        objective::negative_elbo(tape, p, model, &batch, rng)
    };
    match test {
        Some(test) => {
            let mut test_batches = Batcher::new(
                test.len(),
                config.batch_size,
                true,
                stream_rng(config.seed, STREAM_PROBE),
            );
            let mut probe = |p: &ModelParams, rng: &mut ChaCha8Rng| {
                let batch = test.x.select_rows(&test_batches.next_batch());
                batch_neg_elbo(p, model, ObservationModel::Bernoulli, &batch, rng)
            };
            fit(params, config, dataset.len(), loss_fn, Some(&mut probe))
        }
        None => fit(params, config, dataset.len(), loss_fn, None),
    }
}

/// Forward-only negative ELBO of one batch.
pub fn batch_neg_elbo(
    params: &ModelParams,
    model: &ModelConfig,
    observation: ObservationModel,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    Ok(batch_breakdown(params, model, observation, x, rng)?.neg_elbo())
}

fn batch_breakdown(
    params: &ModelParams,
    model: &ModelConfig,
    observation: ObservationModel,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<ElboBreakdown> {
    let mut tape = Tape::new();
    let noise = objective::sample_noise(rng, model, x.rows());
    let graph = objective::build_elbo(&mut tape, params, model, observation, x, &noise)?;
    Ok(graph.breakdown(&tape))
}

/// Rows per forward pass in [`evaluate_elbo`].
const EVAL_CHUNK: usize = 500;

/// Mean breakdown over every observation, averaged over `passes` noise draws.
pub fn evaluate_breakdown(
    dataset: &Dataset,
    params: &ModelParams,
    model: &ModelConfig,
    rng: &mut ChaCha8Rng,
    passes: usize,
) -> Result<ElboBreakdown> {
    if dataset.is_empty() || passes == 0 {
        return Err(Error::Config(
            "evaluation needs a non-empty dataset and passes >= 1".into(),
        ));
    }
    let n = dataset.len();
    let (mut recon, mut klg, mut klf) = (0.0, 0.0, 0.0);
    for _ in 0..passes {
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let batch = dataset.x.select_rows(&idx);
            let b = batch_breakdown(params, model, ObservationModel::Bernoulli, &batch, rng)?;
            let w = idx.len() as f64;
            recon += b.recon * w;
            klg += b.kl_gates * w;
            klf += b.kl_features * w;
        }
    }
    let total = (n * passes) as f64;
    Ok(ElboBreakdown::new(recon / total, klg / total, klf / total))
}

/// Mean negative ELBO over the dataset; parameters are not modified.
pub fn evaluate_elbo(
    dataset: &Dataset,
    params: &ModelParams,
    model: &ModelConfig,
    rng: &mut ChaCha8Rng,
    passes: usize,
) -> Result<f64> {
    Ok(evaluate_breakdown(dataset, params, model, rng, passes)?.neg_elbo())
}
