//! Shared fixtures for the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdlgm_core::model::ModelConfig;
use sdlgm_core::numerics::Tensor;

/// The MNIST architecture shrunk to `d` inputs and `k` categories.
pub fn model(d: usize, k: usize, l0: usize) -> ModelConfig {
    ModelConfig {
        k,
        d,
        l0,
        enc_layers: vec![128, 64],
        sparsity_layers: vec![64],
        dec_layers: vec![64, 128],
        ..ModelConfig::mnist()
    }
}

/// A `[rows×d]` batch of fair coin flips.
pub fn binary_batch(rows: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * d).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    Tensor::new(vec![rows, d], data).expect("shape matches data")
}
