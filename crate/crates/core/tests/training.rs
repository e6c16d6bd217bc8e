use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdlgm_core::data::{
    gen_composite_digits, load_counts, read_idx_images, save_counts, write_idx_images, CompositeSpec, Dataset, Split,
};
use sdlgm_core::gumbel::TEMPERATURE_FLOOR;
use sdlgm_core::metrics::micro_macro_f1;
use sdlgm_core::model::{Init, ModelConfig, ModelParams};
use sdlgm_core::numerics::{Tape, Tensor};
use sdlgm_core::objective::{build_elbo, sample_noise, ObservationModel};
use sdlgm_core::supervised::{self, SupervisedConfig, Task, Variant};
use sdlgm_core::trainer::{self, evaluate_elbo, TrainConfig};

/// Binary rows drawn from a few noisy prototypes.
fn prototypes(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<Vec<bool>> = (0..4).map(|_| (0..d).map(|_| rng.gen_bool(0.5)).collect()).collect();
    let mut x = Vec::with_capacity(n * d);
    for _ in 0..n {
        let p = &protos[rng.gen_range(0..4)];
        x.extend(p.iter().map(|&b| f64::from(u8::from(b ^ rng.gen_bool(0.05)))));
    }
    Dataset::new(Tensor::new(vec![n, d], x).unwrap(), None, Split::Train).unwrap()
}

fn small_model(d: usize) -> ModelConfig {
    ModelConfig {
        k: 8,
        d,
        l0: 3,
        enc_layers: vec![16],
        sparsity_layers: vec![8],
        dec_layers: vec![16],
        ..ModelConfig::mnist()
    }
}

fn small_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 20,
        learning_rate: 3e-3,
        seed: 5,
        eval_every: 100,
        elbo_window: 50,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_model_scores_chance() {
    let data = prototypes(60, 20, 1);
    let model = small_model(20);
    let params = ModelParams::new(&model, true, Init::Zeros).unwrap();
    let v = evaluate_elbo(&data, &params, &model, &mut ChaCha8Rng::seed_from_u64(0), 2).unwrap();
    assert!((v - 20.0 * std::f64::consts::LN_2).abs() < 1e-9, "{v}");
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let data = prototypes(50, 12, 2);
    let model = small_model(12);
    let params = ModelParams::new(&model, true, Init::Glorot { seed: 1 }).unwrap();
    let before = params.store.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    evaluate_elbo(&data, &params, &model, &mut rng, 2).unwrap();
    assert_eq!(params.store.checksum(), before);
}

#[test]
fn training_improves_and_stays_well_formed() {
    let data = prototypes(200, 24, 3);
    let model = small_model(24);
    let config = small_train(400);
    let init = ModelParams::new(&model, true, Init::Glorot { seed: config.seed }).unwrap();
    let start = evaluate_elbo(&data, &init, &model, &mut ChaCha8Rng::seed_from_u64(8), 3).unwrap();
    let (params, log) = trainer::train(&data, None, &model, &config).unwrap();
    assert_eq!(log.records.len(), 400);
    for r in &log.records {
        assert!(r.recon.is_finite() && r.neg_elbo.is_finite());
        assert!(r.kl_g >= -1e-12 && r.kl_f >= -1e-12, "{r:?}");
    }
    assert_eq!(
        log.windows.iter().map(|w| w.iter).collect::<Vec<_>>(),
        vec![100, 200, 300, 400]
    );
    assert!(params.tau() >= TEMPERATURE_FLOOR && params.tau_z() >= TEMPERATURE_FLOOR);
    let end = evaluate_elbo(&data, &params, &model, &mut ChaCha8Rng::seed_from_u64(8), 3).unwrap();
    assert!(end < 0.8 * start, "{start} -> {end}");
}

#[test]
fn runs_are_reproducible() {
    let data = prototypes(80, 10, 4);
    let model = small_model(10);
    let config = small_train(60);
    let (a, la) = trainer::train(&data, Some(&data), &model, &config).unwrap();
    let (b, lb) = trainer::train(&data, Some(&data), &model, &config).unwrap();
    assert_eq!(la.to_jsonl(), lb.to_jsonl());
    assert_eq!(a.store.checksum(), b.store.checksum());
}

/// With a zero label weight the joint objective reduces to the plain ELBO.
#[test]
fn zero_label_weight_matches_the_elbo_gradient() {
    let data = prototypes(6, 10, 5);
    let model = small_model(10);
    let y = Tensor::new(vec![6, 8], (0..48).map(|i| f64::from(u8::from(i % 7 == 0))).collect()).unwrap();
    let sup = SupervisedConfig {
        variant: Variant::Gen,
        label_loss_weight: 0.0,
        observation: ObservationModel::Bernoulli,
        ..SupervisedConfig::default()
    };
    let noise = sample_noise(&mut ChaCha8Rng::seed_from_u64(6), &model, 6);
    let grads = |joint: bool| {
        let mut params = ModelParams::new(&model, true, Init::Glorot { seed: 2 }).unwrap();
        let mut tape = Tape::new();
        let loss = if joint {
            supervised::generative_loss(&mut tape, &params, &model, &sup, &data.x, &y, &noise)
                .unwrap()
                .0
        } else {
            build_elbo(&mut tape, &params, &model, ObservationModel::Bernoulli, &data.x, &noise)
                .unwrap()
                .loss
        };
        let value = tape.scalar(loss);
        tape.backward(loss, &mut params.store).unwrap();
        let g: Vec<f64> = params.store.iter().flat_map(|p| p.grad.data().to_vec()).collect();
        (value, g)
    };
    let (va, ga) = grads(true);
    let (vb, gb) = grads(false);
    assert_eq!(va, vb);
    assert_eq!(ga, gb);
}

#[test]
fn discriminative_model_learns_separable_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d, labels) = (400, 6, 4);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // label j is on when feature j is positive; keep at most two positives
        let mut on: Vec<f64> = (0..labels).map(|j| f64::from(u8::from(row[j] > 0.0))).collect();
        while on.iter().sum::<f64>() > 2.0 {
            let j = on.iter().position(|v| *v == 1.0).unwrap();
            on[j] = 0.0;
        }
        x.extend(row);
        y.extend(on);
    }
    let (x, y) = (
        Tensor::new(vec![n, d], x).unwrap(),
        Tensor::new(vec![n, labels], y).unwrap(),
    );
    let data = Dataset::new(x, Some(y), Split::Train).unwrap();
    let sup = SupervisedConfig::default();
    let base = ModelConfig {
        l0: 2,
        enc_layers: vec![32],
        sparsity_layers: vec![16],
        dec_layers: vec![],
        tau_init: 0.5,
        tau_z_init: 0.5,
        learn_temperature: false,
        ..ModelConfig::mnist()
    };
    let model = sup.model_config(&base, labels, d);
    let config = TrainConfig {
        iterations: 1500,
        batch_size: 50,
        learning_rate: 5e-3,
        seed: 1,
        eval_every: 500,
        elbo_window: 100,
        ..TrainConfig::default()
    };
    let (params, _) = supervised::train_supervised(&data, Task::Multilabel, &model, &sup, &config).unwrap();
    let scores = supervised::label_scores(&data.x, &params, &model, labels).unwrap();
    let pred = supervised::predict_labels(&scores, sup.threshold);
    let f1 = micro_macro_f1(data.labels().unwrap(), &pred).unwrap();
    assert!(f1.micro_f1 > 80.0, "micro F1 {}", f1.micro_f1);
}

#[test]
fn composite_round_trips_through_idx() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 30;
    let pixels: Vec<f64> = (0..n * 16)
        .map(|_| f64::from(rng.gen_range(0u8..=255)) / 255.0)
        .collect();
    let labels: Vec<f64> = (0..n)
        .flat_map(|i| (0..3).map(move |j| f64::from(u8::from(i % 3 == j))))
        .collect();
    let source = Dataset::new(
        Tensor::new(vec![n, 16], pixels).unwrap(),
        Some(Tensor::new(vec![n, 3], labels).unwrap()),
        Split::Train,
    )
    .unwrap();
    let spec = CompositeSpec {
        columns: 5,
        cell: 4,
        n_train: 25,
        n_test: 7,
        ..CompositeSpec::default()
    };
    let strips = gen_composite_digits(&source, &spec, Split::Train).unwrap();
    assert_eq!(strips.x.shape(), &[25, 80]);
    let counts = strips.labels().unwrap();
    assert!(counts.data().chunks(3).all(|r| r.iter().sum::<f64>() <= 5.0));

    let dir = tempfile::tempdir().unwrap();
    let (img_path, cnt_path) = (dir.path().join("images"), dir.path().join("counts"));
    let bytes: Vec<u8> = strips.x.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    write_idx_images(&img_path, 4, 20, &bytes).unwrap();
    save_counts(&cnt_path, counts).unwrap();
    let (_, _, _, back) = read_idx_images(&img_path).unwrap();
    let restored: Vec<f64> = back.iter().map(|&b| f64::from(b) / 255.0).collect();
    assert_eq!(restored, strips.x.data());
    assert_eq!(&load_counts(&cnt_path).unwrap(), counts);
}
