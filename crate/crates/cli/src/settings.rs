//! Optional JSON settings file. Every key is optional; a command-line flag
//! overrides the file, and the file overrides built-in defaults.

use std::fs;
use std::path::Path;

use coopembed::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    // Training.
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub weight_decay: Option<f64>,
    pub proxy_lr_multiplier: Option<f64>,
    pub lambda_ins: Option<f64>,
    pub lambda_attr: Option<f64>,
    pub lambda_cat: Option<f64>,
    pub lambda_reg: Option<f64>,
    pub lambda_order: Option<f64>,
    pub sigma: Option<f64>,
    pub subspace_dim: Option<usize>,
    pub learn_instance_proxies: Option<bool>,
    pub learn_attribute_proxies: Option<bool>,
    pub renormalize_missing: Option<bool>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    // Evaluation and navigation.
    pub recall_k: Option<Vec<usize>>,
    pub k: Option<usize>,
    pub top: Option<usize>,
    // Synthetic data.
    pub value_counts: Option<Vec<usize>>,
    pub ordered_attribute: Option<usize>,
    pub categories: Option<usize>,
    pub train_instances: Option<usize>,
    pub test_instances: Option<usize>,
    pub images_per_instance: Option<usize>,
    pub feature_dim: Option<usize>,
    pub prototype_dim: Option<usize>,
    pub noise_std: Option<f64>,
    pub jitter_std: Option<f64>,
    pub concentration: Option<f64>,
    // Corruption.
    pub fraction: Option<f64>,
    pub mode: Option<String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("invalid settings file {}: {e}", path.display())))
    }
}

/// Flag, else settings file, else default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
