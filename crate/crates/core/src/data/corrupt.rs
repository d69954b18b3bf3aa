//! Attribute-label corruption for noisy-label experiments.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    /// Drop the chosen attribute.
    Absence,
    /// Replace the chosen attribute's value by another value of the same attribute.
    Swap,
    /// Absence or swap with probability one half each.
    Both,
}

impl std::str::FromStr for CorruptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absence" => Ok(CorruptionMode::Absence),
            "swap" => Ok(CorruptionMode::Swap),
            "both" => Ok(CorruptionMode::Both),
            other => Err(Error::Config(format!("unknown corruption mode {other:?}"))),
        }
    }
}

/// Number of train instances corrupted for a given fraction (ties round up).
pub(crate) fn corrupted_count(fraction: f64, train_instances: usize) -> usize {
    (fraction * train_instances as f64 + 0.5).floor() as usize
}

/// Corrupts one attribute of `round(fraction * train instances)` distinct
/// train instances. Every item of a corrupted instance receives the same
/// corruption; query and gallery items are left untouched.
pub fn corrupt_attributes(
    dataset: &Dataset,
    fraction: f64,
    mode: CorruptionMode,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    let train_instances = dataset.train_instances();
    let count = corrupted_count(fraction, train_instances.len());
    if count == 0 {
        return Ok(dataset.clone());
    }

    // Every item of an instance shares one attribute map.
    let mut labels: BTreeMap<usize, Vec<Option<usize>>> = BTreeMap::new();
    for (_, item) in dataset.split_items(Split::Train) {
        labels
            .entry(item.instance)
            .or_insert_with(|| item.attributes.clone());
    }
    for (&instance, attributes) in &labels {
        if attributes.iter().all(Option::is_none) {
            return Err(Error::Dataset(format!(
                "train instance {:?} has no attribute value to corrupt",
                dataset.label_space.instances[instance]
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train_instances;
    order.shuffle(&mut rng);
    let space = dataset.label_space();
    for &instance in &order[..count] {
        let attributes = labels.get_mut(&instance).expect("train instance has labels");
        let exhibited: Vec<usize> = (0..attributes.len())
            .filter(|&k| attributes[k].is_some())
            .collect();
        let k = exhibited[rng.random_range(0..exhibited.len())];
        let swap = match mode {
            CorruptionMode::Absence => false,
            CorruptionMode::Swap => true,
            CorruptionMode::Both => rng.random_bool(0.5),
        };
        if swap {
            let num_values = space.attributes[k].values.len();
            if num_values < 2 {
                return Err(Error::Config(format!(
                    "cannot swap attribute {:?}: it has a single value",
                    space.attributes[k].name
                )));
            }
            let current = attributes[k].expect("exhibited");
            // Uniform over the other values.
            let mut replacement = rng.random_range(0..num_values - 1);
            if replacement >= current {
                replacement += 1;
            }
            attributes[k] = Some(replacement);
        } else {
            attributes[k] = None;
        }
    }

    let items = dataset
        .items()
        .iter()
        .map(|item| {
            let mut item = item.clone();
            if item.split == Split::Train {
                item.attributes = labels[&item.instance].clone();
            }
            item
        })
        .collect();
    dataset.with_items(items)
}
