use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::{Parser, Subcommand};
use sdlgm_cli::commands;
use sdlgm_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "sdlgm", version, about = "Sparse discrete latent generative models")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `section.key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unsupervised model on binarized MNIST.
    TrainUnsup,
    /// Train a multi-label classifier (Dis, Gen or Con) on ARFF data.
    TrainMultilabel,
    /// Train the digit-count regressor on the composite dataset.
    TrainCounts,
    /// Generate the composite digit-count dataset.
    GenData,
    /// Evaluate a checkpoint on its held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write original and reconstructed test images as a PGM grid.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rows: Option<usize>,
    },
    /// Write sampled codes for test rows as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rows: Option<usize>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cli.out.as_path();
    commands::ensure_dir(out)?;
    let start = Instant::now();
    match cli.command {
        Command::TrainUnsup => print_json(&commands::train_unsup(&cfg, out)?)?,
        Command::TrainMultilabel => print_json(&commands::train_multilabel(&cfg, out)?)?,
        Command::TrainCounts => print_json(&commands::train_counts(&cfg, out)?)?,
        Command::GenData => print_json(&commands::gen_data(&cfg, out)?)?,
        Command::Eval { checkpoint } => print_json(&commands::eval(&cfg, &checkpoint, out)?)?,
        Command::Reconstruct { checkpoint, rows } => {
            if let Some(r) = rows {
                cfg.data.reconstruct_rows = r;
            }
            println!("{}", commands::reconstruct(&cfg, &checkpoint, out)?.display());
        }
        Command::Embed { checkpoint, rows } => {
            if let Some(r) = rows {
                cfg.data.embed_rows = r;
            }
            println!("{}", commands::embed(&cfg, &checkpoint, out)?.display());
        }
    }
    eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
