//! The three networks and the two-step latent composition.
//!
//! * feature encoder `f(x; φ)` → log category probabilities `log π` (`[B×K]`)
//! * sparsity network `h(x; γ)` → gate probability `λ` via a 2-way softmax
//! * decoder `g(z; θ)` → Bernoulli logits over the `D` observed dimensions
//!
//! A latent draw opens up to `L0` relaxed gates and adds the matching relaxed
//! one-hot features: `z = Σ_ℓ ω_ℓ z_ℓ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gumbel::{self, GumbelNoise, Temperature, TEMPERATURE_FLOOR};
use crate::numerics::{glorot_uniform, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of latent categories (code width).
    pub k: usize,
    /// Observation dimensionality.
    pub d: usize,
    /// Sparsity budget: number of gated features per observation.
    pub l0: usize,
    /// Prior gate probability.
    pub lambda0: f64,
    /// Prior category probabilities; empty means uniform `1/K`.
    pub alpha: Vec<f64>,
    pub enc_layers: Vec<usize>,
    pub sparsity_layers: Vec<usize>,
    pub dec_layers: Vec<usize>,
    /// Monte Carlo samples per observation and step.
    pub samples: usize,
    /// Initial gate temperature τ.
    pub tau_init: f64,
    /// Initial feature temperature τ_z.
    pub tau_z_init: f64,
    /// Learn both temperatures with the network weights.
    pub learn_temperature: bool,
    /// Split the input into this many equal contiguous blocks. The first layer
    /// of the encoder and sparsity network is shared across blocks and its
    /// activations are summed.
    pub input_tiles: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::mnist()
    }
}

impl ModelConfig {
    /// Binarized MNIST: 784 pixels, 200 categories, budget 40.
    pub fn mnist() -> Self {
        Self {
            k: 200,
            d: 784,
            l0: 40,
            lambda0: 0.5,
            alpha: Vec::new(),
            enc_layers: vec![512, 384, 256],
            sparsity_layers: vec![256, 64],
            dec_layers: vec![256, 384, 512],
            samples: 1,
            tau_init: 1.0,
            tau_z_init: 1.0,
            learn_temperature: true,
            input_tiles: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if self.d == 0 {
            return bad("d must be >= 1".into());
        }
        if self.l0 == 0 {
            return bad("l0 must be >= 1".into());
        }
        if !(self.lambda0 > 0.0 && self.lambda0 < 1.0) {
            return bad(format!("lambda0 must lie in (0, 1), got {}", self.lambda0));
        }
        if !self.alpha.is_empty() {
            if self.alpha.len() != self.k {
                return bad(format!(
                    "alpha has {} entries, expected k = {}",
                    self.alpha.len(),
                    self.k
                ));
            }
            if self.alpha.iter().any(|a| !(*a > 0.0)) {
                return bad("alpha entries must be positive".into());
            }
            let s: f64 = self.alpha.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("alpha must sum to 1, got {s}"));
            }
        }
        if self.samples == 0 {
            return bad("samples must be >= 1".into());
        }
        if self.input_tiles == 0 || !self.d.is_multiple_of(self.input_tiles) {
            return bad(format!("input_tiles = {} must divide d = {}", self.input_tiles, self.d));
        }
        for (name, layers) in [
            ("enc_layers", &self.enc_layers),
            ("sparsity_layers", &self.sparsity_layers),
            ("dec_layers", &self.dec_layers),
        ] {
            if layers.contains(&0) {
                return bad(format!("{name} must not contain zero-width layers"));
            }
        }
        for (name, t) in [("tau_init", self.tau_init), ("tau_z_init", self.tau_z_init)] {
            if !(t > TEMPERATURE_FLOOR) {
                return bad(format!("{name} must exceed {TEMPERATURE_FLOOR}, got {t}"));
            }
        }
        Ok(())
    }

    /// Prior category probabilities, defaulting to uniform.
    pub fn alpha(&self) -> Vec<f64> {
        if self.alpha.is_empty() {
            vec![1.0 / self.k as f64; self.k]
        } else {
            self.alpha.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform Glorot weights from the seed, zero biases.
    Glorot { seed: u64 },
    /// All weights and biases zero.
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Fully connected network: relu on hidden layers, raw logits out.
///
/// With `tiles > 1` the input is cut into `tiles` contiguous blocks, the first
/// layer maps each block with the same weights and the block outputs are summed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub tiles: usize,
}

impl Mlp {
    fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        tiles: usize,
        init: &mut Option<R>,
    ) -> Self {
        let widths = tiled(widths, tiles);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight = match init {
                    Some(rng) => glorot_uniform(rng, fan_in, fan_out),
                    None => Tensor::zeros(&[fan_in, fan_out]),
                };
                Layer {
                    weight: store.add(format!("{prefix}.{i}.weight"), weight),
                    bias: store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[fan_out])),
                }
            })
            .collect();
        Self { layers, tiles }
    }

    fn bind(store: &ParamStore, prefix: &str, widths: &[usize], tiles: usize) -> Result<Self> {
        let widths = tiled(widths, tiles);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = expect_param(store, &format!("{prefix}.{i}.weight"), &[w[0], w[1]])?;
                let bias = expect_param(store, &format!("{prefix}.{i}.bias"), &[w[1]])?;
                Ok(Layer { weight, bias })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, tiles })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (b, d) = {
            let v = tape.value(x);
            (v.rows(), v.cols())
        };
        let mut h = if self.tiles > 1 {
            tape.reshape(x, &[b * self.tiles, d / self.tiles])?
        } else {
            x
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(store, layer.weight);
            let bias = tape.param(store, layer.bias);
            h = tape.affine(h, w, bias)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
            if i == 0 && self.tiles > 1 {
                h = sum_tiles(tape, h, b, self.tiles)?;
            }
        }
        Ok(h)
    }
}

/// Layer widths with the input narrowed to one tile.
fn tiled(widths: &[usize], tiles: usize) -> Vec<usize> {
    let mut w = widths.to_vec();
    w[0] /= tiles;
    w
}

/// `[B·T×H] → [B×H]`, summing the `T` rows of each observation.
fn sum_tiles(tape: &mut Tape, h: Var, b: usize, tiles: usize) -> Result<Var> {
    let width = tape.value(h).cols();
    let flat = tape.reshape(h, &[b, tiles * width])?;
    let mut pool = Tensor::zeros(&[tiles * width, width]);
    for t in 0..tiles {
        for j in 0..width {
            pool.data_mut()[(t * width + j) * width + j] = 1.0;
        }
    }
    let pool = tape.constant(pool);
    tape.matmul(flat, pool)
}

fn expect_param(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .find(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    let got = store.value(id).shape();
    if got != shape {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {got:?}, expected {shape:?}"
        )));
    }
    Ok(id)
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

/// All learnable state: encoder φ, sparsity network γ, optional decoder θ and
/// the two temperature pre-parameters.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub store: ParamStore,
    pub encoder: Mlp,
    pub sparsity: Mlp,
    pub decoder: Option<Mlp>,
    pub tau: Temperature,
    pub tau_z: Temperature,
}

/// Variational parameters for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalOutput {
    /// `[B×K]` log category probabilities.
    pub log_pi: Tensor,
    /// `[B]` gate probabilities in `(0, 1)`.
    pub lambda: Tensor,
}

/// Noise for one relaxed draw of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    /// `[B×L0×2]`
    pub gates: GumbelNoise,
    /// `[B×L0×K]`
    pub features: GumbelNoise,
}

impl LatentNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, batch: usize, l0: usize, k: usize) -> Self {
        Self {
            gates: gumbel::sample_standard_gumbel(rng, &[batch, l0, 2]),
            features: gumbel::sample_standard_gumbel(rng, &[batch, l0, k]),
        }
    }
}

/// Tape handles of a latent draw.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub gates: Var,
    pub features: Var,
    pub code: Var,
}

/// Values of a latent draw.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    /// `[B×L0]` relaxed gates.
    pub omegas: Tensor,
    /// `[B×L0×K]` relaxed one-hot features.
    pub features: Tensor,
    /// `[B×K]` composed code.
    pub code: Tensor,
}

impl LatentSample {
    /// Number of gates that round to one, per row.
    pub fn rounded_sparsity(&self) -> Vec<usize> {
        let l0 = self.omegas.cols();
        self.omegas
            .data()
            .chunks(l0)
            .map(|row| row.iter().filter(|w| **w >= 0.5).count())
            .collect()
    }
}

impl ModelParams {
    pub fn new(config: &ModelConfig, with_decoder: bool, init: Init) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = match init {
            Init::Glorot { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Init::Zeros => None,
        };
        let t = config.input_tiles;
        let encoder = Mlp::register(
            &mut store,
            "encoder",
            &widths(config.d, &config.enc_layers, config.k),
            t,
            &mut rng,
        );
        let sparsity = Mlp::register(
            &mut store,
            "sparsity",
            &widths(config.d, &config.sparsity_layers, 2),
            t,
            &mut rng,
        );
        let decoder = with_decoder.then(|| {
            Mlp::register(
                &mut store,
                "decoder",
                &widths(config.k, &config.dec_layers, config.d),
                1,
                &mut rng,
            )
        });
        let tau = Temperature::register(&mut store, "tau.pre", config.tau_init)?;
        let tau_z = Temperature::register(&mut store, "tau_z.pre", config.tau_z_init)?;
        let mut params = Self {
            store,
            encoder,
            sparsity,
            decoder,
            tau,
            tau_z,
        };
        params.set_temperature_trainable(config.learn_temperature);
        Ok(params)
    }

    /// Re-attaches a loaded store, checking every tensor shape against `config`.
    pub fn from_store(config: &ModelConfig, with_decoder: bool, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let t = config.input_tiles;
        let encoder = Mlp::bind(&store, "encoder", &widths(config.d, &config.enc_layers, config.k), t)?;
        let sparsity = Mlp::bind(&store, "sparsity", &widths(config.d, &config.sparsity_layers, 2), t)?;
        let decoder = if with_decoder {
            Some(Mlp::bind(
                &store,
                "decoder",
                &widths(config.k, &config.dec_layers, config.d),
                1,
            )?)
        } else {
            None
        };
        let tau = Temperature {
            pre_param: expect_param(&store, "tau.pre", &[])?,
            floor: TEMPERATURE_FLOOR,
        };
        let tau_z = Temperature {
            pre_param: expect_param(&store, "tau_z.pre", &[])?,
            floor: TEMPERATURE_FLOOR,
        };
        let expected =
            2 * (encoder.layers.len() + sparsity.layers.len() + decoder.as_ref().map_or(0, |d| d.layers.len())) + 2;
        if store.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors for this configuration, found {}",
                store.len()
            )));
        }
        let mut params = Self {
            store,
            encoder,
            sparsity,
            decoder,
            tau,
            tau_z,
        };
        params.set_temperature_trainable(config.learn_temperature);
        Ok(params)
    }

    fn set_temperature_trainable(&mut self, trainable: bool) {
        for t in [self.tau, self.tau_z] {
            self.store.get_mut(t.pre_param).trainable = trainable;
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau.value(&self.store)
    }

    pub fn tau_z(&self) -> f64 {
        self.tau_z.value(&self.store)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let d = self.store.value(self.encoder.layers[0].weight).shape()[0] * self.encoder.tiles;
        if x.ndim() != 2 || x.cols() != d {
            return Err(Error::shape("model input", x.shape(), &[x.rows(), d]));
        }
        Ok(())
    }

    /// `log π = log_softmax(f(x; φ))`, `[B×K]`.
    pub fn encode_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let logits = self.encoder.forward(tape, &self.store, x)?;
        Ok(tape.log_softmax(logits))
    }

    /// `(log λ, log(1 − λ))` per row from the sparsity network's two logits, `[B×2]`.
    pub fn sparsity_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let logits = self.sparsity.forward(tape, &self.store, x)?;
        Ok(tape.log_softmax(logits))
    }

    /// Draws gates and features with the given noise and composes the code.
    pub fn sample_code_on_tape(
        &self,
        tape: &mut Tape,
        log_pi: Var,
        log_lambda2: Var,
        noise: &LatentNoise,
    ) -> Result<LatentVars> {
        let tau = self.tau.on_tape(tape, &self.store);
        let tau_z = self.tau_z.on_tape(tape, &self.store);
        let gates = gumbel::binary_concrete_on_tape(tape, log_lambda2, &noise.gates, tau)?;
        let features = gumbel::concrete_k_on_tape(tape, log_pi, &noise.features, tau_z)?;
        let code = tape.compose_code(gates, features)?;
        Ok(LatentVars { gates, features, code })
    }

    /// Decoder logits `[B×D]`.
    pub fn decode_logits_on_tape(&self, tape: &mut Tape, code: Var) -> Result<Var> {
        let decoder = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Contract("this model has no decoder".into()))?;
        decoder.forward(tape, &self.store, code)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let lp = self.encode_on_tape(&mut tape, xv)?;
        Ok(tape.value(lp).clone())
    }

    /// Gate probabilities `λ`, `[B]`.
    pub fn sparsity(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l2 = self.sparsity_on_tape(&mut tape, xv)?;
        let first = tape.take_last(l2, 0)?;
        Ok(tape.value(first).map(f64::exp))
    }

    pub fn variational(&self, x: &Tensor) -> Result<VariationalOutput> {
        Ok(VariationalOutput {
            log_pi: self.encode(x)?,
            lambda: self.sparsity(x)?,
        })
    }

    /// Relaxed latent draw from given variational parameters.
    pub fn sample_code<R: Rng + ?Sized>(
        &self,
        vo: &VariationalOutput,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<LatentSample> {
        let (b, k) = (vo.log_pi.rows(), vo.log_pi.cols());
        let noise = LatentNoise::sample(rng, b, config.l0, k);
        self.sample_code_with_noise(vo, &noise)
    }

    pub fn sample_code_with_noise(&self, vo: &VariationalOutput, noise: &LatentNoise) -> Result<LatentSample> {
        let b = vo.log_pi.rows();
        if vo.lambda.len() != b {
            return Err(Error::shape("sample_code", vo.log_pi.shape(), vo.lambda.shape()));
        }
        if let Some(bad) = vo.lambda.data().iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            return Err(Error::Domain(format!("gate probability {bad} outside (0, 1)")));
        }
        let mut tape = Tape::new();
        let lp = tape.constant(vo.log_pi.clone());
        let l2 = Tensor::from_parts(
            vec![b, 2],
            vo.lambda.data().iter().flat_map(|l| [l.ln(), (1.0 - l).ln()]).collect(),
        );
        let l2 = tape.constant(l2);
        let vars = self.sample_code_on_tape(&mut tape, lp, l2, noise)?;
        Ok(LatentSample {
            omegas: tape.value(vars.gates).clone(),
            features: tape.value(vars.features).clone(),
            code: tape.value(vars.code).clone(),
        })
    }

    /// Bernoulli means `β = sigmoid(g(z; θ))`, `[B×D]`.
    pub fn decode(&self, code: &Tensor) -> Result<Tensor> {
        if code.data().iter().any(|v| *v < 0.0) {
            return Err(Error::Domain("code entries must be non-negative".into()));
        }
        let mut tape = Tape::new();
        let c = tape.constant(code.clone());
        let logits = self.decode_logits_on_tape(&mut tape, c)?;
        let beta = tape.sigmoid(logits);
        Ok(tape.value(beta).clone())
    }

    /// Encode, draw one relaxed code and decode: Bernoulli means `[B×D]`.
    pub fn reconstruct<R: Rng + ?Sized>(&self, x: &Tensor, config: &ModelConfig, rng: &mut R) -> Result<Tensor> {
        let vo = self.variational(x)?;
        let sample = self.sample_code(&vo, config, rng)?;
        self.decode(&sample.code)
    }
}
