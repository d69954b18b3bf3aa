//! Synthetic datasets with planted instance, attribute and category
//! structure.
//!
//! Each attribute value owns a prototype vector. A category is a set of
//! value preferences, one distribution per attribute. An instance draws its
//! category, then one value per attribute from that category's preferences;
//! its latent code is the concatenation of the chosen prototypes plus a
//! per-instance jitter. Every image of the instance is `G · code + noise`
//! for one fixed random mixing matrix `G`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, AttributeSpec, Dataset, Item, LabelSpace, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of values of each attribute.
    pub value_counts: Vec<usize>,
    /// Attribute whose prototypes follow a random walk in value order.
    pub ordered_attribute: Option<usize>,
    pub categories: usize,
    pub train_instances: usize,
    pub test_instances: usize,
    pub images_per_instance: usize,
    pub feature_dim: usize,
    /// Prototype width per attribute.
    pub prototype_dim: usize,
    pub noise_std: f64,
    /// Std of the per-instance offset added to the latent code.
    pub jitter_std: f64,
    /// Inverse temperature of the category value preferences; `None` makes
    /// every category pick a single value per attribute.
    pub concentration: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            value_counts: vec![5; 4],
            ordered_attribute: Some(0),
            categories: 6,
            train_instances: 200,
            test_instances: 100,
            images_per_instance: 4,
            feature_dim: 64,
            prototype_dim: 8,
            noise_std: 0.1,
            jitter_std: 1.0,
            concentration: Some(5.0),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn code_dim(&self) -> usize {
        self.value_counts.len() * self.prototype_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.value_counts.is_empty() {
            return bad("at least one attribute is required".into());
        }
        if let Some(v) = self.value_counts.iter().find(|&&v| v < 2) {
            return bad(format!("every attribute needs >= 2 values, got {v}"));
        }
        for (name, count) in [
            ("categories", self.categories),
            ("train instances", self.train_instances),
            ("test instances", self.test_instances),
            ("prototype dim", self.prototype_dim),
        ] {
            if count == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.images_per_instance < 2 {
            return bad(format!(
                "test instances need >= 2 images for a query and a gallery item, got {}",
                self.images_per_instance
            ));
        }
        if self.feature_dim < self.code_dim() {
            return bad(format!(
                "feature dim {} is smaller than the latent code dim {}",
                self.feature_dim,
                self.code_dim()
            ));
        }
        for (name, std) in [("noise std", self.noise_std), ("jitter std", self.jitter_std)] {
            if !(std.is_finite() && std >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {std}"));
            }
        }
        if let Some(c) = self.concentration {
            if !(c.is_finite() && c >= 0.0) {
                return bad(format!("concentration must be finite and >= 0, got {c}"));
            }
        }
        if let Some(k) = self.ordered_attribute {
            if k >= self.value_counts.len() {
                return bad(format!("ordered attribute {k} out of range"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTruth {
    pub id: String,
    pub category: usize,
    pub values: Vec<usize>,
    pub jitter: Vec<f64>,
}

/// Everything drawn while generating, for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    /// `prototypes[k][v]` is the prototype of value `v` of attribute `k`.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// `preferences[y][k][v]`: probability that category `y` picks value `v`.
    pub preferences: Vec<Vec<Vec<f64>>>,
    /// Row-major `feature_dim × code_dim` mixing matrix.
    pub mixing: Vec<f64>,
    pub instances: Vec<InstanceTruth>,
}

fn normal_vec<R: Rng>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn preferences<R: Rng>(rng: &mut R, values: usize, concentration: Option<f64>) -> Vec<f64> {
    let logits = normal_vec(rng, values, 1.0);
    match concentration {
        None => {
            let best = (0..values)
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                .unwrap();
            (0..values).map(|v| if v == best { 1.0 } else { 0.0 }).collect()
        }
        Some(c) => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|z| (c * (z - max)).exp()).collect();
            let sum: f64 = exp.iter().sum();
            exp.into_iter().map(|e| e / sum).collect()
        }
    }
}

/// Draws a dataset and the ground truth behind it; a pure function of the
/// config.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k_count = config.value_counts.len();
    let pd = config.prototype_dim;
    let code_dim = config.code_dim();

    let prototypes: Vec<Vec<Vec<f64>>> = config
        .value_counts
        .iter()
        .enumerate()
        .map(|(k, &values)| {
            if config.ordered_attribute == Some(k) {
                let mut walk = vec![normal_vec(&mut rng, pd, 1.0)];
                for _ in 1..values {
                    let step = normal_vec(&mut rng, pd, 1.0);
                    let next = walk.last().unwrap().iter().zip(step).map(|(p, s)| p + s).collect();
                    walk.push(next);
                }
                walk
            } else {
                (0..values).map(|_| normal_vec(&mut rng, pd, 1.0)).collect()
            }
        })
        .collect();

    let preferences: Vec<Vec<Vec<f64>>> = (0..config.categories)
        .map(|_| {
            config
                .value_counts
                .iter()
                .map(|&v| preferences(&mut rng, v, config.concentration))
                .collect()
        })
        .collect();
    let samplers: Vec<Vec<WeightedIndex<f64>>> = preferences
        .iter()
        .map(|per_attr| {
            per_attr
                .iter()
                .map(|p| WeightedIndex::new(p).expect("preferences are a distribution"))
                .collect()
        })
        .collect();

    let mixing = normal_vec(&mut rng, config.feature_dim * code_dim, 1.0 / (code_dim as f64).sqrt());

    let total_instances = config.train_instances + config.test_instances;
    let mut instances = Vec::with_capacity(total_instances);
    for i in 0..total_instances {
        let (id, category) = if i < config.train_instances {
            // The first train instances cover every category once.
            let y = if i < config.categories { i } else { rng.random_range(0..config.categories) };
            (format!("train{i:04}"), y)
        } else {
            let t = i - config.train_instances;
            (format!("test{t:04}"), rng.random_range(0..config.categories))
        };
        let values: Vec<usize> = samplers[category].iter().map(|s| s.sample(&mut rng)).collect();
        let jitter = normal_vec(&mut rng, code_dim, config.jitter_std);
        instances.push(InstanceTruth { id, category, values, jitter });
    }

    let m = config.images_per_instance;
    let mut features = Array2::zeros((total_instances * m, config.feature_dim));
    let mut items = Vec::with_capacity(total_instances * m);
    let mut code = vec![0.0; code_dim];
    for (i, inst) in instances.iter().enumerate() {
        for (k, &v) in inst.values.iter().enumerate() {
            for j in 0..pd {
                code[k * pd + j] = prototypes[k][v][j] + inst.jitter[k * pd + j];
            }
        }
        let train = i < config.train_instances;
        for img in 0..m {
            let row = items.len();
            for (f, out) in features.row_mut(row).iter_mut().enumerate() {
                let mixed: f64 = mixing[f * code_dim..(f + 1) * code_dim]
                    .iter()
                    .zip(&code)
                    .map(|(g, c)| g * c)
                    .sum();
                let noise = config.noise_std * rng.sample::<f64, _>(StandardNormal);
                // Stored at the precision of the feature file.
                *out = (mixed + noise) as f32 as f64;
            }
            let split = if train {
                Split::Train
            } else if img < m / 2 {
                Split::Query
            } else {
                Split::Gallery
            };
            items.push(Item {
                item_id: format!("{}_{img}", inst.id),
                instance: i,
                category: inst.category,
                attributes: inst.values.iter().map(|&v| Some(v)).collect(),
                split,
                feature_row: row,
            });
        }
    }

    let attributes = config
        .value_counts
        .iter()
        .enumerate()
        .map(|(k, &count)| {
            let names: Vec<String> = (0..count).map(|v| format!("v{v}")).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            if config.ordered_attribute == Some(k) {
                AttributeSpec::ordinal(format!("attr{k}"), &names, (1..=count).map(|r| r as f64).collect())
            } else {
                AttributeSpec::categorical(format!("attr{k}"), &names)
            }
        })
        .collect();
    let space = LabelSpace::new(
        attributes,
        (0..config.categories).map(|y| format!("cat{y}")).collect(),
        instances.iter().map(|i| i.id.clone()).collect(),
    )?;
    debug_assert_eq!(k_count, space.num_attributes());
    let dataset = Dataset::new(space, items, features)?;
    let truth = GroundTruth {
        config: config.clone(),
        prototypes,
        preferences,
        mixing,
        instances,
    };
    Ok((dataset, truth))
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.cefv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Writes `manifest.json`, `features.cefv` and `ground_truth.json` into `dir`.
pub fn write_synthetic(dir: &Path, dataset: &Dataset, truth: &GroundTruth) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_dataset(dataset, &dir.join(MANIFEST_FILE), &dir.join(FEATURES_FILE))?;
    let mut json = serde_json::to_vec_pretty(truth).expect("ground truth serialises");
    json.push(b'\n');
    let path = dir.join(GROUND_TRUTH_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
