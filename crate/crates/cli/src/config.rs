//! TOML run configuration. Every value is optional; command-line flags
//! override file values, and anything still unset falls back to the built-in
//! defaults. Unknown keys are rejected outright.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use mpstan_core::data::SplitRatios;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub paths: PathsSection,
    pub gravity: GravitySection,
    pub dims: DimsSection,
    pub train: TrainSection,
    pub simulate: SimulateSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub cases: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub distances: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GravitySection {
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub r: Option<f64>,
    pub top_e: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DimsSection {
    pub d_gru: Option<usize>,
    pub d_gat: Option<usize>,
    pub heads: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub seed: Option<u64>,
    pub t_in: Option<usize>,
    pub t_out: Option<usize>,
    pub split: Option<SplitRatios>,
    pub ablation: Option<String>,
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub d_s: Option<f64>,
    pub d_i: Option<f64>,
    pub d_r: Option<f64>,
    pub horizon: Option<usize>,
    pub initial_infected: Option<f64>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}
