//! Negative ELBO: Monte Carlo reconstruction term plus the closed-form KL
//! divergences of the gates and the features, all as batch means in nats.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentNoise, LatentVars, ModelConfig, ModelParams};
use crate::numerics::{Tape, Tensor, Var};

/// Likelihood of an observation given the decoder output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationModel {
    /// Independent Bernoulli pixels; `x` must be binary.
    #[default]
    Bernoulli,
    /// Unit-variance Gaussian around the decoder output, for real-valued features.
    Gaussian,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl_gates: f64,
    pub kl_features: f64,
    pub elbo: f64,
}

impl ElboBreakdown {
    pub fn new(recon: f64, kl_gates: f64, kl_features: f64) -> Self {
        Self {
            recon,
            kl_gates,
            kl_features,
            elbo: recon - kl_gates - kl_features,
        }
    }

    pub fn neg_elbo(&self) -> f64 {
        -self.elbo
    }
}

/// Batch-mean Bernoulli log-likelihood `Σ_d x log β + (1 − x) log(1 − β)`.
pub fn recon_loglik(x: &Tensor, beta: &Tensor) -> Result<f64> {
    if x.shape() != beta.shape() || x.ndim() != 2 {
        return Err(Error::shape("recon_loglik", x.shape(), beta.shape()));
    }
    check_binary(x)?;
    if let Some(b) = beta.data().iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
        return Err(Error::Domain(format!("Bernoulli mean {b} outside (0, 1)")));
    }
    let total: f64 = x
        .data()
        .iter()
        .zip(beta.data())
        .map(|(&x, &b)| if x == 1.0 { b.ln() } else { (1.0 - b).ln() })
        .sum();
    Ok(total / x.rows() as f64)
}

/// Batch-mean `L0 · KL(Bern(λ) ‖ Bern(λ0))`.
pub fn kl_gates(lambda: &Tensor, lambda0: f64, l0: usize) -> Result<f64> {
    let mut total = 0.0;
    for &l in lambda.data() {
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::Domain(format!("gate probability {l} outside (0, 1)")));
        }
        total += l * (l / lambda0).ln() + (1.0 - l) * ((1.0 - l) / (1.0 - lambda0)).ln();
    }
    Ok(l0 as f64 * total / lambda.len() as f64)
}

/// Batch-mean `L0 · Σ_k π_k log(π_k / α_k)` from `log π: [B×K]`.
pub fn kl_features(log_pi: &Tensor, alpha: &[f64], l0: usize) -> Result<f64> {
    if log_pi.cols() != alpha.len() {
        return Err(Error::shape("kl_features", log_pi.shape(), &[alpha.len()]));
    }
    let mut total = 0.0;
    for row in log_pi.data().chunks(alpha.len()) {
        for (lp, a) in row.iter().zip(alpha) {
            total += lp.exp() * (lp - a.ln());
        }
    }
    Ok(l0 as f64 * total / log_pi.rows() as f64)
}

fn check_binary(x: &Tensor) -> Result<()> {
    match x.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        Some(v) => Err(Error::Domain(format!(
            "Bernoulli observations must be 0 or 1, found {v}"
        ))),
        None => Ok(()),
    }
}

/// Tape handles of an assembled objective.
#[derive(Clone, Debug)]
pub struct ElboGraph {
    /// Batch-mean negative ELBO.
    pub loss: Var,
    /// Batch-mean reconstruction log-likelihood, averaged over samples.
    pub recon: Var,
    pub kl_gates: Var,
    pub kl_features: Var,
    pub log_pi: Var,
    pub log_lambda2: Var,
    pub samples: Vec<LatentVars>,
}

impl ElboGraph {
    pub fn breakdown(&self, tape: &Tape) -> ElboBreakdown {
        ElboBreakdown::new(
            tape.scalar(self.recon),
            tape.scalar(self.kl_gates),
            tape.scalar(self.kl_features),
        )
    }
}

/// Encoder and sparsity network outputs on the tape.
pub fn variational_on_tape(tape: &mut Tape, params: &ModelParams, x: Var) -> Result<(Var, Var)> {
    let log_pi = params.encode_on_tape(tape, x)?;
    let log_lambda2 = params.sparsity_on_tape(tape, x)?;
    Ok((log_pi, log_lambda2))
}

/// Batch-mean gate and feature KL terms.
pub fn kl_on_tape(tape: &mut Tape, config: &ModelConfig, log_pi: Var, log_lambda2: Var) -> Result<(Var, Var)> {
    let b = tape.value(log_pi).rows() as f64;
    let scale = config.l0 as f64 / b;
    let prior_g = Tensor::from_parts(vec![2], vec![config.lambda0.ln(), (1.0 - config.lambda0).ln()]);
    let klg = tape.kl_categorical(log_lambda2, prior_g)?;
    let klg = tape.scale(klg, scale);
    let prior_f = Tensor::from_parts(vec![config.k], config.alpha().iter().map(|a| a.ln()).collect());
    let klf = tape.kl_categorical(log_pi, prior_f)?;
    let klf = tape.scale(klf, scale);
    Ok((klg, klf))
}

/// Batch-mean log-likelihood of `x` under the decoder applied to `code`.
pub fn recon_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    observation: ObservationModel,
    x: &Tensor,
    code: Var,
) -> Result<Var> {
    let logits = params.decode_logits_on_tape(tape, code)?;
    let b = x.rows() as f64;
    let total = match observation {
        ObservationModel::Bernoulli => tape.bernoulli_loglik(logits, x.clone())?,
        ObservationModel::Gaussian => {
            let xv = tape.constant(x.clone());
            let diff = tape.sub(logits, xv)?;
            let sq = tape.square(diff);
            let s = tape.sum(sq);
            let norm = 0.5 * (2.0 * std::f64::consts::PI).ln() * x.len() as f64;
            let s = tape.scale(s, -0.5);
            tape.add_scalar(s, -norm)
        }
    };
    Ok(tape.scale(total, 1.0 / b))
}

/// Assembles the negative ELBO for a batch with one noise block per MC sample.
pub fn build_elbo(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    observation: ObservationModel,
    x: &Tensor,
    noise: &[LatentNoise],
) -> Result<ElboGraph> {
    if noise.is_empty() {
        return Err(Error::Contract("at least one noise sample is required".into()));
    }
    if observation == ObservationModel::Bernoulli {
        check_binary(x)?;
    }
    let xv = tape.constant(x.clone());
    let (log_pi, log_lambda2) = variational_on_tape(tape, params, xv)?;
    let mut samples = Vec::with_capacity(noise.len());
    let mut recon: Option<Var> = None;
    for n in noise {
        let latent = params.sample_code_on_tape(tape, log_pi, log_lambda2, n)?;
        let r = recon_on_tape(tape, params, observation, x, latent.code)?;
        recon = Some(match recon {
            None => r,
            Some(acc) => tape.add(acc, r)?,
        });
        samples.push(latent);
    }
    let recon = tape.scale(recon.expect("non-empty noise"), 1.0 / noise.len() as f64);
    let (kl_gates, kl_features) = kl_on_tape(tape, config, log_pi, log_lambda2)?;
    let kl = tape.add(kl_gates, kl_features)?;
    let loss = tape.sub(kl, recon)?;
    Ok(ElboGraph {
        loss,
        recon,
        kl_gates,
        kl_features,
        log_pi,
        log_lambda2,
        samples,
    })
}

/// Draws `config.samples` noise blocks for a batch of `batch` rows.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, config: &ModelConfig, batch: usize) -> Vec<LatentNoise> {
    (0..config.samples)
        .map(|_| LatentNoise::sample(rng, batch, config.l0, config.k))
        .collect()
}

/// Negative ELBO of a binary batch with fresh noise. Returns the scalar loss
/// node (ready for [`Tape::backward`]) and its breakdown.
pub fn negative_elbo<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
    rng: &mut R,
) -> Result<(Var, ElboBreakdown)> {
    let noise = sample_noise(rng, config, x.rows());
    let graph = build_elbo(tape, params, config, ObservationModel::Bernoulli, x, &noise)?;
    Ok((graph.loss, graph.breakdown(tape)))
}
