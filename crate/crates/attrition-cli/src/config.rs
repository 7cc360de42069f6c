//! TOML configuration files for the subcommands.
//!
//! Unknown keys are rejected. Relative data paths resolve against the
//! directory containing the configuration file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use attrition::dgp::DgpSpec;
use attrition::harness::ModelSpec;
use attrition::measure::GridStrategy;

fn default_link() -> String {
    "logit".into()
}

fn default_seed() -> u64 {
    0
}

fn default_levels() -> Vec<f64> {
    vec![0.90, 0.95]
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    60
}

fn default_cal_tol() -> f64 {
    1e-4
}

fn default_draws() -> usize {
    attrition::dgp::CALIBRATION_DRAWS
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EstimateConfig {
    pub panel: PathBuf,
    pub refreshment: PathBuf,
    #[serde(default = "default_link")]
    pub link: String,
    #[serde(default)]
    pub grid: GridStrategy,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Bootstrap replicates; zero disables interval construction.
    #[serde(default)]
    pub bootstrap: usize,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Worker threads; zero means one per logical CPU.
    #[serde(default)]
    pub threads: usize,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SimulateConfig {
    pub n1: usize,
    pub nr: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
    pub dgp: DgpSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CalibrateConfig {
    pub target_attrition: f64,
    #[serde(default = "default_cal_tol")]
    pub tol: f64,
    /// Quadrature draws for continuous designs.
    #[serde(default = "default_draws")]
    pub draws: usize,
    pub dgp: DgpSpec,
}

pub fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
}

/// Resolve a possibly relative data path against the config file location.
pub fn resolve(config_path: &Path, data_path: &Path) -> PathBuf {
    if data_path.is_absolute() {
        data_path.to_path_buf()
    } else {
        config_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(data_path)
    }
}
