//! The JSON run configuration. Every section has defaults and unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use ahnet_core::data::DEFAULT_ID_PATTERN;
use ahnet_core::segnet::{NetworkHooks, NetworkSpec, TrainConfig, Variant};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub network: NetworkSpec,
    /// Sets the ablation flags of `network` (and the gate hook) when present.
    pub variant: Option<Variant>,
    pub train: TrainConfig,
    pub paths: Paths,
    pub preprocess: PreprocessConfig,
    pub serve: ServeConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub bundle: PathBuf,
    /// Evaluation bundle; the training bundle when absent.
    pub eval_bundle: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub model: PathBuf,
    pub train_report: PathBuf,
    pub eval_report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            bundle: "data/train.ulsb".into(),
            eval_bundle: None,
            checkpoint_dir: "runs/checkpoints".into(),
            model: "runs/model.mahw".into(),
            train_report: "runs/train_report.json".into(),
            eval_report: "runs/eval_report.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Output slice side length.
    pub size: usize,
    /// Regex whose first capture group (or whole match) is the pairing id.
    pub id_pattern: String,
    pub image_dir: String,
    pub label_dir: String,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            size: 256,
            id_pattern: DEFAULT_ID_PATTERN.into(),
            image_dir: "images".into(),
            label_dir: "labels".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Request bodies above this many bytes get 413.
    pub max_body_bytes: usize,
    /// Images with a side above this get 413.
    pub max_side: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            max_body_bytes: 8 << 20,
            max_side: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub epochs: usize,
    pub repeats: usize,
    /// Synthetic cases used when `paths.bundle` does not exist.
    pub synth_cases: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: vec![Variant::Ahnet, Variant::MambaAhnetRecon],
            epochs: 2,
            repeats: 3,
            synth_cases: 8,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network_spec().0.validate()?;
        self.train.validate()?;
        if self.preprocess.size == 0 {
            anyhow::bail!("preprocess.size must be positive");
        }
        regex::Regex::new(&self.preprocess.id_pattern).context("preprocess.id_pattern")?;
        Ok(())
    }

    /// The network spec and hooks after applying `variant`.
    pub fn network_spec(&self) -> (NetworkSpec, NetworkHooks) {
        match self.variant {
            Some(v) => v.configure(self.network),
            None => (self.network, NetworkHooks::default()),
        }
    }

    pub fn eval_bundle(&self) -> &Path {
        self.paths.eval_bundle.as_deref().unwrap_or(&self.paths.bundle)
    }
}
