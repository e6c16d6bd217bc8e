//! Acceptance gate. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run a subset by number: `cargo test --release --test acceptance -- 1 4 10`.
//! Datasets are read from `$SDLGM_DATA_DIR`, or `data/` at the workspace root.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdlgm_cli::commands;
use sdlgm_cli::config::{RunConfig, DATA_DIR_ENV};
use sdlgm_core::checkpoint::{Checkpoint, CheckpointMeta};
use sdlgm_core::data::Split;
use sdlgm_core::gumbel::{binary_concrete, sample_standard_gumbel};
use sdlgm_core::metrics::micro_macro_f1;
use sdlgm_core::model::{Init, LatentNoise, ModelConfig, ModelParams, VariationalOutput};
use sdlgm_core::numerics::{grad_check, Tensor};
use sdlgm_core::objective::{build_elbo, kl_features, kl_gates, ObservationModel};
use sdlgm_core::trainer::{self, TrainConfig};

type Check = fn() -> Result<String>;

const CRITERIA: &[(u32, &str, Check)] = &[
    (1, "ELBO gradients match finite differences", gradient_correctness),
    (2, "sampler invariants over 10^4 draws", sampler_invariants),
    (3, "rounded-gate sums follow Binomial(40, 0.5)", binomial_sparsity),
    (4, "closed-form KL values", kl_oracles),
    (5, "zero-initialized model sits at chance level", chance_level),
    (6, "binarized MNIST held-out negative ELBO", mnist_training),
    (7, "Emotions multi-label F1", emotions_multilabel),
    (8, "digit-count MSE", digit_counts),
    (9, "determinism and checkpoint round trip", determinism),
    (10, "micro/macro F1 hand-enumerated case", f1_oracle),
];

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data"))
}

/// Loads a file from `configs/` with the data root pinned.
fn run_config(name: &str, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = vec![format!("data.root={:?}", data_root().display().to_string())];
    overrides.extend_from_slice(extra);
    RunConfig::load(Some(&workspace_root().join("configs").join(name)), &overrides)
}

fn mnist_config() -> Result<RunConfig> {
    let cfg = run_config("mnist.toml", &[])?;
    let mnist = cfg.data.resolve(&cfg.data.mnist_dir);
    ensure!(
        mnist.join("train-images-idx3-ubyte").exists(),
        "MNIST not found under {} (see scripts/fetch_data.sh)",
        mnist.display()
    );
    Ok(cfg)
}

fn close(actual: f64, expected: f64, tol: f64) -> bool {
    (actual - expected).abs() <= tol
}

fn gradient_correctness() -> Result<String> {
    let start = Instant::now();
    let model = ModelConfig {
        k: 8,
        d: 12,
        l0: 3,
        enc_layers: vec![10],
        sparsity_layers: vec![6],
        dec_layers: vec![10],
        ..ModelConfig::mnist()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::new(
        vec![4, 12],
        (0..48).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect(),
    )?;
    let noise = vec![LatentNoise::sample(&mut rng, 4, model.l0, model.k)];
    let mut store = ModelParams::new(&model, true, Init::Glorot { seed: 5 })?.store;
    let worst = grad_check(&mut store, 1e-6, |tape, store| {
        let params = ModelParams::from_store(&model, true, store.clone())?;
        Ok(build_elbo(tape, &params, &model, ObservationModel::Bernoulli, &x, &noise)?.loss)
    })?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < 1e-4, "max relative error {worst:e} >= 1e-4");
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("max rel err {worst:.2e}, {secs:.2}s"))
}

fn sampler_invariants() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (batches, rows) = (100, 100);
    let (mut max_simplex, mut max_mass) = (0.0f64, 0.0f64);
    for _ in 0..batches {
        let model = ModelConfig {
            k: rng.gen_range(2..12),
            d: 3,
            l0: rng.gen_range(1..8),
            enc_layers: vec![],
            sparsity_layers: vec![],
            dec_layers: vec![],
            tau_init: rng.gen_range(0.15..3.0),
            tau_z_init: rng.gen_range(0.15..3.0),
            ..ModelConfig::mnist()
        };
        let params = ModelParams::new(&model, false, Init::Zeros)?;
        let k = model.k;
        let mut log_pi = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            log_pi.extend(logits.iter().map(|v| v - lse));
        }
        let vo = VariationalOutput {
            log_pi: Tensor::new(vec![rows, k], log_pi)?,
            lambda: Tensor::new(vec![rows], (0..rows).map(|_| rng.gen_range(0.001..0.999)).collect())?,
        };
        let s = params.sample_code(&vo, &model, &mut rng)?;
        for f in s.features.data().chunks(k) {
            max_simplex = max_simplex.max((f.iter().sum::<f64>() - 1.0).abs());
        }
        ensure!(
            s.omegas.data().iter().all(|w| *w > 0.0 && *w < 1.0),
            "gate outside (0, 1)"
        );
        for i in 0..rows {
            let code: f64 = s.code.row(i).iter().sum();
            let mass: f64 = s.omegas.row(i).iter().sum();
            max_mass = max_mass.max((code - mass).abs());
            ensure!(
                code <= model.l0 as f64 + 1e-9,
                "code mass {code} exceeds L0 = {}",
                model.l0
            );
        }
    }
    ensure!(max_simplex <= 1e-9, "feature sum off by {max_simplex:e}");
    ensure!(max_mass <= 1e-9, "code mass identity off by {max_mass:e}");
    Ok(format!(
        "{} draws, simplex err {max_simplex:.1e}, mass err {max_mass:.1e}",
        batches * rows
    ))
}

fn binomial_sparsity() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, l0) = (10_000, 40);
    let noise = sample_standard_gumbel(&mut rng, &[n, l0, 2]);
    let mut sums = Vec::with_capacity(n);
    for draw in noise.xi.data().chunks(2 * l0) {
        let mut on = 0usize;
        for xi in draw.chunks(2) {
            if binary_concrete(0.5, 0.5, [xi[0], xi[1]])? >= 0.5 {
                on += 1;
            }
        }
        sums.push(on as f64);
    }
    let mean = sums.iter().sum::<f64>() / n as f64;
    let var = sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    ensure!((19.7..=20.3).contains(&mean), "mean {mean}");
    ensure!((8.5..=11.5).contains(&var), "variance {var}");
    Ok(format!("mean {mean:.3}, variance {var:.3}"))
}

/// Direct evaluation of both KL sums.
fn kl_bernoulli_direct(lambda: f64, lambda0: f64, l0: f64) -> f64 {
    l0 * (lambda * (lambda / lambda0).ln() + (1.0 - lambda) * ((1.0 - lambda) / (1.0 - lambda0)).ln())
}

fn kl_categorical_direct(pi: &[f64], alpha: &[f64], l0: f64) -> f64 {
    l0 * pi.iter().zip(alpha).map(|(p, a)| p * (p / a).ln()).sum::<f64>()
}

fn kl_oracles() -> Result<String> {
    let g = kl_gates(&Tensor::new(vec![1], vec![0.9])?, 0.5, 40)?;
    let f = kl_features(
        &Tensor::new(vec![1, 2], vec![0.8f64.ln(), 0.2f64.ln()])?,
        &[0.5, 0.5],
        10,
    )?;
    let (g_ref, f_ref) = (
        kl_bernoulli_direct(0.9, 0.5, 40.0),
        kl_categorical_direct(&[0.8, 0.2], &[0.5, 0.5], 10.0),
    );
    ensure!(
        close(g, 14.7226, 1e-3) && close(g, g_ref, 1e-12),
        "kl_gates {g} (direct {g_ref})"
    );
    ensure!(
        close(f, 1.92745, 1e-4) && close(f, f_ref, 1e-12),
        "kl_features {f} (direct {f_ref})"
    );
    let g0 = kl_gates(&Tensor::new(vec![1], vec![0.5])?, 0.5, 40)?;
    let f0 = kl_features(&Tensor::new(vec![1, 2], vec![0.5f64.ln(); 2])?, &[0.5, 0.5], 10)?;
    ensure!(
        g0.abs() <= 1e-12 && f0.abs() <= 1e-12,
        "KL at the prior: {g0:e}, {f0:e}"
    );
    Ok(format!("kl_gates {g:.5}, kl_features {f:.6}"))
}

fn chance_level() -> Result<String> {
    let cfg = mnist_config()?;
    let test = commands::load_binary_mnist(&cfg, Split::Test)?;
    let params = ModelParams::new(&cfg.model, true, Init::Zeros)?;
    let v = trainer::evaluate_elbo(&test, &params, &cfg.model, &mut ChaCha8Rng::seed_from_u64(5), 1)?;
    let analytic = 784.0 * std::f64::consts::LN_2;
    ensure!(close(v, 543.43, 0.5), "negative ELBO {v}");
    Ok(format!("negative ELBO {v:.4} (784 ln 2 = {analytic:.4})"))
}

fn mnist_training() -> Result<String> {
    let cfg = mnist_config()?;
    ensure!(
        cfg.model == ModelConfig::mnist(),
        "configs/mnist.toml drifted from the reference architecture"
    );
    ensure!(
        cfg.train.iterations == 10_000 && cfg.train.batch_size == 100 && cfg.train.elbo_window == 200,
        "configs/mnist.toml must run 10k iterations of batch 100 with a 200-iteration window"
    );
    ensure!(
        cfg.data.train_subset == Some(10_000),
        "configs/mnist.toml must use a 10k training subset"
    );
    let train = commands::load_binary_mnist(&cfg, Split::Train)?;
    let test = commands::load_binary_mnist(&cfg, Split::Test)?;
    let start = Instant::now();
    let (_, log) = trainer::train(&train, Some(&test), &cfg.model, &cfg.train)?;
    let secs = start.elapsed().as_secs_f64();
    let at = |iter: usize| {
        log.windows
            .iter()
            .find(|w| w.iter == iter)
            .and_then(|w| w.test_neg_elbo)
            .with_context(|| format!("no held-out window at {iter}"))
    };
    let (early, last) = (at(2_000)?, at(10_000)?);
    let detail = format!("test -ELBO {early:.2} at 2k, {last:.2} at 10k, {:.0} min", secs / 60.0);
    ensure!(early <= 250.0, "{detail}: 2k gate is 250");
    ensure!(last <= 115.0, "{detail}: 10k gate is 115");
    ensure!(secs <= 7200.0, "{detail}: over 2 h");
    Ok(detail)
}

fn emotions_multilabel() -> Result<String> {
    let cfg = run_config("emotions.toml", &[])?;
    ensure!(
        cfg.model.l0 == 2 && cfg.model.tau_init == 3.0 && !cfg.model.learn_temperature,
        "configs/emotions.toml must fix tau = 3 with L0 = 2"
    );
    ensure!(
        cfg.supervised.threshold == 0.2,
        "configs/emotions.toml must threshold at 0.2"
    );
    ensure!(
        cfg.supervised.variant == sdlgm_core::supervised::Variant::Dis,
        "the gate uses the Dis variant"
    );
    let train_file = cfg.data.resolve(&cfg.data.arff_train);
    ensure!(
        train_file.exists(),
        "Emotions ARFF not found at {} (no copy is available offline)",
        train_file.display()
    );
    let out = tempfile::tempdir()?;
    let s = commands::train_multilabel(&cfg, out.path())?;
    let (micro, base) = (s.report.micro_f1, s.baseline.micro_f1);
    let detail = format!(
        "micro F1 {micro:.2}, baseline {base:.2}, macro F1 {:.2}",
        s.report.macro_f1
    );
    ensure!(micro >= 60.0, "{detail}: gate is 60");
    ensure!(micro - base >= 10.0, "{detail}: must beat the baseline by 10");
    Ok(detail)
}

fn digit_counts() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let composite = dir.path().join("composite");
    let extra = [format!("data.composite_dir={:?}", composite.display().to_string())];
    let cfg = run_config("counts.toml", &extra)?;
    mnist_config()?;
    std::fs::create_dir_all(&composite)?;
    commands::gen_data(&cfg, &composite)?;
    let train = commands::load_composite(&composite, Split::Train)?;
    let test = commands::load_composite(&composite, Split::Test)?;
    ensure!(
        train.len() == 5_000 && test.len() == 1_000,
        "split sizes {} / {}",
        train.len(),
        test.len()
    );
    let s = commands::train_counts(&cfg, dir.path())?;
    let detail = format!("test MSE {:.4}, mean-predictor MSE {:.4}", s.mse, s.baseline_mse);
    ensure!(s.mse <= 0.12, "{detail}: gate is 0.12");
    ensure!(s.mse < s.baseline_mse, "{detail}: not below the baseline");
    Ok(detail)
}

fn determinism() -> Result<String> {
    let cfg = mnist_config()?;
    let train = commands::load_binary_mnist(&cfg, Split::Train)?.head(2_000);
    let test = commands::load_binary_mnist(&cfg, Split::Test)?.head(500);
    let config = TrainConfig {
        iterations: 100,
        eval_every: 50,
        elbo_window: 20,
        seed: 17,
        ..cfg.train.clone()
    };
    let run = || trainer::train(&train, Some(&test), &cfg.model, &config);
    let (params, a) = run()?;
    let (_, b) = run()?;
    ensure!(a.records.len() == 100, "logged {} iterations", a.records.len());
    if a.to_jsonl() != b.to_jsonl() {
        bail!("metric logs differ between identical runs");
    }

    let ck = Checkpoint {
        model: cfg.model.clone(),
        meta: CheckpointMeta {
            task: "unsup".into(),
            with_decoder: true,
            seed: config.seed,
            ..CheckpointMeta::default()
        },
        params,
        standardizer: None,
    };
    let file = tempfile::NamedTempFile::new()?;
    ck.save(file.path())?;
    let loaded = Checkpoint::load(file.path())?;
    let eval = |p: &ModelParams| trainer::evaluate_elbo(&test, p, &cfg.model, &mut ChaCha8Rng::seed_from_u64(9), 2);
    let (before, after) = (eval(&ck.params)?, eval(&loaded.params)?);
    ensure!(
        before.to_bits() == after.to_bits(),
        "evaluate_elbo {before} became {after}"
    );
    Ok(format!(
        "100-iteration logs identical, held-out -ELBO {before:.4} before and after reload"
    ))
}

fn f1_oracle() -> Result<String> {
    let y_true = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0])?;
    let y_pred = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let r = micro_macro_f1(&y_true, &y_pred)?;
    ensure!(close(r.micro_f1, 80.0, 1e-9), "micro {}", r.micro_f1);
    ensure!(close(r.macro_f1, 83.333, 1e-3), "macro {}", r.macro_f1);
    Ok(format!("micro {:.4}, macro {:.4}", r.micro_f1, r.macro_f1))
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let chosen: Vec<_> = CRITERIA
        .iter()
        .filter(|(n, _, _)| selected.is_empty() || selected.contains(n))
        .collect();
    let handles: Vec<_> = chosen
        .iter()
        .map(|&&(n, name, check)| {
            let handle = thread::Builder::new()
                .name(format!("criterion-{n}"))
                .spawn(move || {
                    let start = Instant::now();
                    (check(), start.elapsed())
                })
                .expect("spawn");
            (n, name, handle)
        })
        .collect();
    let mut failed = 0;
    for (n, name, handle) in handles {
        let (outcome, elapsed): (Result<String>, Duration) = match handle.join() {
            Ok(r) => r,
            Err(_) => (Err(anyhow::anyhow!("panicked")), Duration::ZERO),
        };
        match outcome {
            Ok(detail) => println!(
                "PASS criterion {n:>2}: {name}: {detail} [{:.1}s]",
                elapsed.as_secs_f64()
            ),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {n:>2}: {name}: {e:#} [{:.1}s]", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", chosen.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
