//! Run configuration: a TOML file with `[model]`, `[train]`, `[supervised]`
//! and `[data]` sections, plus `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sdlgm_core::data::CompositeSpec;
use sdlgm_core::model::ModelConfig;
use sdlgm_core::supervised::SupervisedConfig;
use sdlgm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "SDLGM_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root; falls back to `$SDLGM_DATA_DIR`, then `./data`.
    pub root: Option<PathBuf>,
    /// MNIST IDX directory, relative to the root.
    pub mnist_dir: PathBuf,
    /// Use only the first N training images.
    pub train_subset: Option<usize>,
    /// Use only the first N test images.
    pub test_subset: Option<usize>,
    /// Noise passes for full held-out evaluation.
    pub eval_passes: usize,
    pub arff_train: PathBuf,
    pub arff_test: PathBuf,
    /// Number of trailing label attributes; ignored when `label_names` is set.
    pub label_count: usize,
    pub label_names: Vec<String>,
    /// Directory of the generated count dataset, relative to the root.
    pub composite_dir: PathBuf,
    pub composite: CompositeSpec,
    /// Width in pixels of one image row, for image dumps.
    pub image_width: usize,
    /// Rows written by `reconstruct`.
    pub reconstruct_rows: usize,
    /// Rows written by `embed`.
    pub embed_rows: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            mnist_dir: PathBuf::from("mnist"),
            train_subset: None,
            test_subset: None,
            eval_passes: 1,
            arff_train: PathBuf::from("emotions/emotions-train.arff"),
            arff_test: PathBuf::from("emotions/emotions-test.arff"),
            label_count: 6,
            label_names: Vec::new(),
            composite_dir: PathBuf::from("composite"),
            composite: CompositeSpec::default(),
            image_width: 28,
            reconstruct_rows: 16,
            embed_rows: 3000,
        }
    }
}

impl DataConfig {
    pub fn root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root().join(rel)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub supervised: SupervisedConfig,
    pub data: DataConfig,
}

/// Parses the right-hand side of an override as a TOML value, or as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not of the form section.key=value"))?;
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .with_context(|| format!("empty key in `{spec}`"))?;
    if parts.is_empty() {
        bail!("override `{spec}` needs a section, e.g. train.iterations=100");
    }
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{spec}` is not a section"))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads an optional config file, applies overrides and validates every section.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let origin = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {origin}"))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .with_context(|| format!("invalid configuration in {origin}"))?;
        config
            .validate()
            .with_context(|| format!("invalid configuration in {origin}"))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("[model]")?;
        self.train.validate().context("[train]")?;
        self.supervised.validate().context("[supervised]")?;
        self.data.composite.validate().context("[data.composite]")?;
        if self.data.eval_passes == 0 {
            bail!("[data]: eval_passes must be >= 1");
        }
        if self.data.image_width == 0 {
            bail!("[data]: image_width must be >= 1");
        }
        Ok(())
    }
}
