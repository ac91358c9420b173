//! Optional configuration file mirroring the command-line flags.
//!
//! Every flag has a twin under the matching section of a TOML file passed
//! with `--config`; explicit flags win over file values.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub generate: GenerateFile,
    #[serde(default)]
    pub train: TrainFile,
    #[serde(default)]
    pub simulate: SimulateFile,
    #[serde(default)]
    pub evaluate: EvaluateFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateFile {
    pub spec: Option<PathBuf>,
    pub preset: Option<String>,
    pub out: Option<PathBuf>,
    pub modes: Option<usize>,
    pub seed: Option<u64>,
    pub count: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub segment_ms: Option<f64>,
    pub val_period: Option<usize>,
    pub seed: Option<u64>,
    pub hidden: Option<usize>,
    pub neg_slope: Option<f64>,
    pub lambda0: Option<f64>,
    pub eps: Option<f64>,
    pub lr: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub checkpoint: Option<PathBuf>,
    pub oracle: Option<bool>,
    pub linear: Option<bool>,
    pub modes: Option<usize>,
    pub fs: Option<f64>,
    pub duration: Option<f64>,
    pub gamma: Option<f64>,
    pub kappa: Option<f64>,
    pub nu: Option<f64>,
    pub sigma0: Option<f64>,
    pub sigma1_hat: Option<f64>,
    pub length: Option<f64>,
    pub density: Option<f64>,
    pub radius: Option<f64>,
    pub tension: Option<f64>,
    pub young: Option<f64>,
    pub sigma1: Option<f64>,
    pub famp: Option<f64>,
    pub te: Option<f64>,
    pub xe: Option<f64>,
    pub xo: Option<f64>,
    pub lambda0: Option<f64>,
    pub eps: Option<f64>,
    pub wav: Option<PathBuf>,
    pub pcm16: Option<bool>,
    pub traj: Option<PathBuf>,
    pub spectrogram: Option<PathBuf>,
    pub window: Option<usize>,
    pub hop: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateFile {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub window_ms: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let body = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&body).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

/// Flags win over file values.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn pick_opt<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}
