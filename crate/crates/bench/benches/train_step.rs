use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdlgm_bench::{binary_batch, model};
use sdlgm_core::gumbel::sample_standard_gumbel;
use sdlgm_core::model::{Init, ModelConfig, ModelParams};
use sdlgm_core::numerics::{Tape, Tensor};
use sdlgm_core::trainer::{train_step, OptimizerState, TrainConfig};

fn step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (name, cfg) in [("small", model(196, 50, 10)), ("mnist", ModelConfig::mnist())] {
        let batch = binary_batch(100, cfg.d, 1);
        let train = TrainConfig::default();
        let mut params = ModelParams::new(&cfg, true, Init::Glorot { seed: 0 }).unwrap();
        let mut state = OptimizerState::new(&params.store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        group.bench_function(name, |b| {
            b.iter(|| train_step(&batch, &mut params, &mut state, &cfg, &train, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig::mnist();
    let params = ModelParams::new(&cfg, true, Init::Glorot { seed: 0 }).unwrap();
    let batch = binary_batch(100, cfg.d, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    c.bench_function("reconstruct/mnist", |b| {
        b.iter(|| params.reconstruct(&batch, &cfg, &mut rng).unwrap())
    });
}

fn relaxed_sampling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Tensor::zeros(&[100, 200]);
    c.bench_function("gumbel_softmax/100x40x200", |b| {
        b.iter_batched(
            || sample_standard_gumbel(&mut rng, &[100, 40, 200]).xi,
            |noise| {
                let mut tape = Tape::new();
                let lp = tape.constant(logits.clone());
                let lp = tape.log_softmax(lp);
                let tau = tape.constant(Tensor::scalar(0.7));
                tape.gumbel_softmax(lp, noise, tau).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, step, forward, relaxed_sampling);
criterion_main!(benches);
