//! Sparse deep latent generative model with a learned, per-observation L0
//! sparsity.
//!
//! Each observation gets `L0` relaxed Bernoulli gates and `L0` relaxed
//! categorical features; the code is the gated sum of the features, so the
//! number of open gates is the (learned) sparsity of the representation.
//! Everything is differentiated by the tape in [`numerics`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gumbel;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod supervised;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{LatentSample, ModelConfig, ModelParams, VariationalOutput};
pub use numerics::{ParamStore, Tape, Tensor, Var};
pub use objective::ElboBreakdown;
pub use trainer::{OptimizerState, TrainConfig};
