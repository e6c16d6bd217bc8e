//! Reparameterised relaxed sampling.
//!
//! Gates use a 2-way Gumbel-Softmax over `(λ, 1 − λ)`; features use a K-way
//! Gumbel-Softmax over the encoder's category probabilities. Noise is drawn
//! up front as [`GumbelNoise`] so a sample is a deterministic, differentiable
//! function of the parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{softplus, ParamId, ParamStore, Tape, Tensor, Var};

/// Uniform draws are clamped to `[UNIFORM_EPS, 1 − UNIFORM_EPS]` before the double log.
pub const UNIFORM_EPS: f64 = 1e-10;

/// Relaxed gates are clamped to `[GATE_EPS, 1 − GATE_EPS]`; at low temperature
/// the 2-way softmax otherwise rounds to exactly 0 or 1.
pub const GATE_EPS: f64 = 1e-12;

/// Lower bound added to every learned temperature.
pub const TEMPERATURE_FLOOR: f64 = 0.1;

/// Standard Gumbel variate from a uniform draw: `−log(−log(u))`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// A block of i.i.d. standard Gumbel draws.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise {
    pub xi: Tensor,
}

pub fn sample_standard_gumbel<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> GumbelNoise {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect();
    GumbelNoise {
        xi: Tensor::new(shape.to_vec(), data).expect("shape covers data"),
    }
}

/// A learnable temperature `τ = softplus(pre) + floor`, always above the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub pre_param: ParamId,
    pub floor: f64,
}

impl Temperature {
    /// Registers the pre-parameter so the effective temperature starts at `initial`.
    pub fn register(store: &mut ParamStore, name: &str, initial: f64) -> Result<Self> {
        let pre = inverse_softplus(initial - TEMPERATURE_FLOOR)?;
        let pre_param = store.add(name, Tensor::scalar(pre));
        Ok(Self {
            pre_param,
            floor: TEMPERATURE_FLOOR,
        })
    }

    pub fn value(&self, store: &ParamStore) -> f64 {
        softplus(store.value(self.pre_param).data()[0]) + self.floor
    }

    /// Records `softplus(pre) + floor` on the tape.
    pub fn on_tape(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let pre = tape.param(store, self.pre_param);
        let sp = tape.softplus(pre);
        tape.add_scalar(sp, self.floor)
    }
}

/// `softplus⁻¹(y) = log(exp(y) − 1)` for `y > 0`.
pub fn inverse_softplus(y: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must exceed the floor {TEMPERATURE_FLOOR}"
        )));
    }
    // exp_m1 keeps precision for small y; for large y the correction vanishes
    Ok(if y > 30.0 { y } else { y.exp_m1().ln() })
}

/// Relaxed Bernoulli gates on the tape.
///
/// `log_lambda2: [B×2]` holds `(log λ, log(1 − λ))` per row; `noise: [B×L×2]`.
/// Returns `[B×L]` gates, the first component of each 2-way relaxed draw.
pub fn binary_concrete_on_tape(tape: &mut Tape, log_lambda2: Var, noise: &GumbelNoise, tau: Var) -> Result<Var> {
    let y = tape.gumbel_softmax(log_lambda2, noise.xi.clone(), tau)?;
    let w = tape.take_last(y, 0)?;
    Ok(tape.clamp(w, GATE_EPS, 1.0 - GATE_EPS))
}

/// Relaxed one-hot features on the tape: `log_pi: [B×K]`, `noise: [B×L×K]` → `[B×L×K]`.
pub fn concrete_k_on_tape(tape: &mut Tape, log_pi: Var, noise: &GumbelNoise, tau_z: Var) -> Result<Var> {
    if tape.value(log_pi).cols() < 2 {
        return Err(Error::Domain("relaxed categorical needs K >= 2".into()));
    }
    tape.gumbel_softmax(log_pi, noise.xi.clone(), tau_z)
}

/// One relaxed gate `ω ∈ (0, 1)` for probability `lambda`, temperature `tau`
/// and noise `(ξ₁, ξ₂)`.
pub fn binary_concrete(lambda: f64, tau: f64, xi: [f64; 2]) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!(
            "gate probability must lie in (0, 1), got {lambda}"
        )));
    }
    let mut tape = Tape::new();
    let lp = tape.constant(Tensor::from_parts(vec![1, 2], vec![lambda.ln(), (1.0 - lambda).ln()]));
    let t = tape.constant(Tensor::scalar(tau));
    let noise = GumbelNoise {
        xi: Tensor::from_parts(vec![1, 1, 2], xi.to_vec()),
    };
    let w = binary_concrete_on_tape(&mut tape, lp, &noise, t)?;
    Ok(tape.scalar(w))
}

/// One relaxed one-hot sample on the simplex.
pub fn concrete_k(log_pi: &[f64], tau: f64, xi: &[f64]) -> Result<Vec<f64>> {
    let k = log_pi.len();
    if k < 2 {
        return Err(Error::Domain("relaxed categorical needs K >= 2".into()));
    }
    if xi.len() != k {
        return Err(Error::shape("concrete_k", &[k], &[xi.len()]));
    }
    let mass: f64 = log_pi.iter().map(|v| v.exp()).sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "log-probabilities must exponentiate-sum to 1, got {mass}"
        )));
    }
    let mut tape = Tape::new();
    let lp = tape.constant(Tensor::from_parts(vec![1, k], log_pi.to_vec()));
    let t = tape.constant(Tensor::scalar(tau));
    let noise = GumbelNoise {
        xi: Tensor::from_parts(vec![1, 1, k], xi.to_vec()),
    };
    let z = concrete_k_on_tape(&mut tape, lp, &noise, t)?;
    Ok(tape.value(z).data().to_vec())
}
