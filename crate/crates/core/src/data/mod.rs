//! Labelled datasets: label space, items, manifest and feature-file I/O.

mod corrupt;
pub mod features;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corrupt::{corrupt_attributes, CorruptionMode};

pub const MANIFEST_VERSION: u32 = 1;

/// A named attribute with its value set. Ordered attributes carry one rank
/// per value, strictly increasing in declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
    #[serde(default)]
    pub ordered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<Vec<f64>>,
}

impl AttributeSpec {
    pub fn categorical(name: impl Into<String>, values: &[&str]) -> Self {
        AttributeSpec {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
            ordered: false,
            ranks: None,
        }
    }

    pub fn ordinal(name: impl Into<String>, values: &[&str], ranks: Vec<f64>) -> Self {
        AttributeSpec {
            ordered: true,
            ranks: Some(ranks),
            ..Self::categorical(name, values)
        }
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(format!("attribute {:?}: {msg}", self.name)));
        if self.values.len() < 2 {
            return bad("needs at least 2 values".into());
        }
        if !all_unique(self.values.iter()) {
            return bad("duplicate value names".into());
        }
        match (self.ordered, &self.ranks) {
            (false, None) => Ok(()),
            (false, Some(_)) => bad("ranks given for an unordered attribute".into()),
            (true, None) => bad("ordered attribute without ranks".into()),
            (true, Some(ranks)) => {
                if ranks.len() != self.values.len() {
                    return bad(format!("{} ranks for {} values", ranks.len(), self.values.len()));
                }
                if ranks.iter().any(|r| !r.is_finite()) {
                    return bad("non-finite rank".into());
                }
                if ranks.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("ranks must be strictly increasing".into());
                }
                Ok(())
            }
        }
    }
}

fn all_unique<'a>(names: impl Iterator<Item = &'a String>) -> bool {
    let mut seen = HashSet::new();
    names.into_iter().all(|n| seen.insert(n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub attributes: Vec<AttributeSpec>,
    pub categories: Vec<String>,
    pub instances: Vec<String>,
}

impl LabelSpace {
    pub fn new(
        attributes: Vec<AttributeSpec>,
        categories: Vec<String>,
        instances: Vec<String>,
    ) -> Result<Self> {
        let space = LabelSpace {
            attributes,
            categories,
            instances,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        for attribute in &self.attributes {
            attribute.validate()?;
        }
        if !all_unique(self.attributes.iter().map(|a| &a.name)) {
            return Err(Error::Manifest("duplicate attribute names".into()));
        }
        if !all_unique(self.categories.iter()) {
            return Err(Error::Manifest("duplicate category names".into()));
        }
        if !all_unique(self.instances.iter()) {
            return Err(Error::Manifest("duplicate instance ids".into()));
        }
        Ok(())
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn instance_index(&self, id: &str) -> Option<usize> {
        self.instances.iter().position(|i| i == id)
    }

    /// Same attributes and categories (instances may differ).
    pub fn same_vocabulary(&self, other: &LabelSpace) -> bool {
        self.attributes == other.attributes && self.categories == other.categories
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

/// One image. Attribute values are indices into the attribute's value list;
/// `None` means the attribute is not exhibited.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub item_id: String,
    pub instance: usize,
    pub category: usize,
    pub attributes: Vec<Option<usize>>,
    pub split: Split,
    pub feature_row: usize,
}

impl Item {
    pub fn exhibits(&self, attribute: usize, value: usize) -> bool {
        self.attributes.get(attribute).copied().flatten() == Some(value)
    }
}

/// A validated, immutable labelled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    label_space: LabelSpace,
    items: Vec<Item>,
    features: Array2<f64>,
}

impl Dataset {
    pub fn new(label_space: LabelSpace, items: Vec<Item>, features: Array2<f64>) -> Result<Self> {
        label_space.validate()?;
        let (rows, dim) = features.dim();
        if dim == 0 {
            return Err(Error::Features("feature dimension must be positive".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Features("non-finite feature value".into()));
        }

        let mut ids = HashSet::new();
        // instance -> (category, attributes, split class)
        let mut per_instance: HashMap<usize, (usize, &[Option<usize>], bool)> = HashMap::new();
        let mut has_gallery = HashSet::new();
        for item in &items {
            if !ids.insert(item.item_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate item_id {:?}", item.item_id)));
            }
            if item.feature_row >= rows {
                return Err(Error::Dataset(format!(
                    "feature_row out of range: item {:?} references row {} of {rows}",
                    item.item_id, item.feature_row
                )));
            }
            if item.instance >= label_space.instances.len() {
                return Err(Error::Dataset(format!("item {:?}: unknown instance", item.item_id)));
            }
            if item.category >= label_space.categories.len() {
                return Err(Error::Dataset(format!("item {:?}: unknown category", item.item_id)));
            }
            if item.attributes.len() != label_space.num_attributes() {
                return Err(Error::Dataset(format!(
                    "item {:?}: {} attribute slots for {} attributes",
                    item.item_id,
                    item.attributes.len(),
                    label_space.num_attributes()
                )));
            }
            for (k, value) in item.attributes.iter().enumerate() {
                if let Some(v) = value {
                    if *v >= label_space.attributes[k].values.len() {
                        return Err(Error::Dataset(format!(
                            "item {:?}: unknown attribute value index {v} for {:?}",
                            item.item_id, label_space.attributes[k].name
                        )));
                    }
                }
            }
            let is_test = item.split != Split::Train;
            if item.split == Split::Gallery {
                has_gallery.insert(item.instance);
            }
            match per_instance.get(&item.instance) {
                None => {
                    per_instance.insert(
                        item.instance,
                        (item.category, item.attributes.as_slice(), is_test),
                    );
                }
                Some(&(category, attributes, test)) => {
                    let name = &label_space.instances[item.instance];
                    if category != item.category || attributes != item.attributes.as_slice() {
                        return Err(Error::Dataset(format!(
                            "instance {name:?} has inconsistent labels across its items"
                        )));
                    }
                    if test != is_test {
                        return Err(Error::Dataset(format!(
                            "instance {name:?} appears in both train and query/gallery splits"
                        )));
                    }
                }
            }
        }
        for (&instance, &(_, _, test)) in &per_instance {
            if test && !has_gallery.contains(&instance) {
                return Err(Error::Dataset(format!(
                    "instance {:?} has no gallery item",
                    label_space.instances[instance]
                )));
            }
        }

        Ok(Dataset {
            label_space,
            items,
            features,
        })
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn feature(&self, item: &Item) -> &[f64] {
        self.features
            .row(item.feature_row)
            .to_slice()
            .expect("feature matrix is in standard layout")
    }

    pub fn split_items(&self, split: Split) -> impl Iterator<Item = (usize, &Item)> {
        self.items
            .iter()
            .enumerate()
            .filter(move |(_, item)| item.split == split)
    }

    /// Distinct train instances in ascending index order.
    pub fn train_instances(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .split_items(Split::Train)
            .map(|(_, item)| item.instance)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub(crate) fn with_items(&self, items: Vec<Item>) -> Result<Self> {
        Dataset::new(self.label_space.clone(), items, self.features.clone())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    attributes: Vec<AttributeSpec>,
    categories: Vec<String>,
    items: Vec<ManifestItem>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestItem {
    item_id: String,
    instance: String,
    category: String,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
    split: Split,
    feature_row: usize,
}

/// Builds a dataset from a manifest document and an already decoded feature
/// matrix.
pub fn dataset_from_manifest(manifest_json: &[u8], features: Array2<f64>) -> Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_slice(manifest_json).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!("unsupported version {}", manifest.version)));
    }
    let mut instances: Vec<String> = Vec::new();
    let mut instance_lookup: HashMap<String, usize> = HashMap::new();
    for item in &manifest.items {
        if !instance_lookup.contains_key(&item.instance) {
            instance_lookup.insert(item.instance.clone(), instances.len());
            instances.push(item.instance.clone());
        }
    }
    let label_space = LabelSpace::new(manifest.attributes, manifest.categories, instances)?;

    let mut items = Vec::with_capacity(manifest.items.len());
    for raw in manifest.items {
        let category = label_space.category_index(&raw.category).ok_or_else(|| {
            Error::Manifest(format!("item {:?}: unknown category {:?}", raw.item_id, raw.category))
        })?;
        let mut attributes = vec![None; label_space.num_attributes()];
        for (name, value) in &raw.attributes {
            let k = label_space.attribute_index(name).ok_or_else(|| {
                Error::Manifest(format!("item {:?}: unknown attribute {name:?}", raw.item_id))
            })?;
            let v = label_space.attributes[k].value_index(value).ok_or_else(|| {
                Error::Manifest(format!(
                    "item {:?}: unknown attribute value {value:?} for attribute {name:?}",
                    raw.item_id
                ))
            })?;
            attributes[k] = Some(v);
        }
        items.push(Item {
            instance: instance_lookup[&raw.instance],
            item_id: raw.item_id,
            category,
            attributes,
            split: raw.split,
            feature_row: raw.feature_row,
        });
    }
    Dataset::new(label_space, items, features)
}

pub fn load_dataset(manifest_path: &Path, features_path: &Path) -> Result<Dataset> {
    let manifest = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let features = features::read_features(features_path)?;
    dataset_from_manifest(&manifest, features)
}

/// Serialises the manifest part of a dataset (pretty JSON, trailing newline).
pub fn manifest_bytes(dataset: &Dataset) -> Vec<u8> {
    let space = &dataset.label_space;
    let items = dataset
        .items
        .iter()
        .map(|item| ManifestItem {
            item_id: item.item_id.clone(),
            instance: space.instances[item.instance].clone(),
            category: space.categories[item.category].clone(),
            attributes: item
                .attributes
                .iter()
                .enumerate()
                .filter_map(|(k, v)| {
                    v.map(|v| {
                        let attribute = &space.attributes[k];
                        (attribute.name.clone(), attribute.values[v].clone())
                    })
                })
                .collect(),
            split: item.split,
            feature_row: item.feature_row,
        })
        .collect();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        attributes: space.attributes.clone(),
        categories: space.categories.clone(),
        items,
    };
    let mut out = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    out.push(b'\n');
    out
}

pub fn save_dataset(dataset: &Dataset, manifest_path: &Path, features_path: &Path) -> Result<()> {
    fs::write(manifest_path, manifest_bytes(dataset)).map_err(|e| Error::io(manifest_path, e))?;
    features::write_features(features_path, &dataset.features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn one_item_manifest(attrs: &str, row: usize) -> String {
        format!(
            r#"{{"version": 1,
                "attributes": [{{"name": "hemline", "values": ["mini", "maxi"], "ordered": false}}],
                "categories": ["dress"],
                "items": [{{"item_id": "a", "instance": "p1", "category": "dress",
                            "attributes": {attrs}, "split": "train", "feature_row": {row}}}]}}"#
        )
    }

    #[test]
    fn loads_single_item() {
        let ds = dataset_from_manifest(
            one_item_manifest(r#"{"hemline": "mini"}"#, 0).as_bytes(),
            Array2::zeros((1, 4)),
        )
        .unwrap();
        assert_eq!(ds.items().len(), 1);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.items()[0].attributes, vec![Some(0)]);
    }

    #[test]
    fn feature_row_out_of_range() {
        let err = dataset_from_manifest(
            one_item_manifest("{}", 5).as_bytes(),
            Array2::zeros((3, 2)),
        )
        .unwrap_err();
        assert!(err.to_string().contains("feature_row out of range"), "{err}");
    }

    #[test]
    fn unknown_attribute_value() {
        let err = dataset_from_manifest(
            one_item_manifest(r#"{"hemline": "zip"}"#, 0).as_bytes(),
            Array2::zeros((1, 2)),
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown attribute value"), "{err}");
    }

    #[test]
    fn rejects_duplicate_ids_and_unknown_category() {
        let dup = r#"{"version": 1, "attributes": [], "categories": ["c"],
            "items": [
              {"item_id": "a", "instance": "p", "category": "c", "split": "train", "feature_row": 0},
              {"item_id": "a", "instance": "p", "category": "c", "split": "train", "feature_row": 0}]}"#;
        let err = dataset_from_manifest(dup.as_bytes(), Array2::zeros((1, 2))).unwrap_err();
        assert!(err.to_string().contains("duplicate item_id"));

        let unknown = r#"{"version": 1, "attributes": [], "categories": ["c"],
            "items": [{"item_id": "a", "instance": "p", "category": "x", "split": "train", "feature_row": 0}]}"#;
        assert!(dataset_from_manifest(unknown.as_bytes(), Array2::zeros((1, 2))).is_err());
        assert!(dataset_from_manifest(b"{not json", Array2::zeros((1, 2))).is_err());
    }

    #[test]
    fn rejects_instance_in_train_and_test() {
        let m = r#"{"version": 1, "attributes": [], "categories": ["c"],
            "items": [
              {"item_id": "a", "instance": "p", "category": "c", "split": "train", "feature_row": 0},
              {"item_id": "b", "instance": "p", "category": "c", "split": "gallery", "feature_row": 0}]}"#;
        let err = dataset_from_manifest(m.as_bytes(), Array2::zeros((1, 2))).unwrap_err();
        assert!(err.to_string().contains("both train"));
    }

    #[test]
    fn rejects_query_instance_without_gallery() {
        let m = r#"{"version": 1, "attributes": [], "categories": ["c"],
            "items": [{"item_id": "a", "instance": "p", "category": "c", "split": "query", "feature_row": 0}]}"#;
        let err = dataset_from_manifest(m.as_bytes(), Array2::zeros((1, 2))).unwrap_err();
        assert!(err.to_string().contains("no gallery item"));
    }

    #[test]
    fn attribute_spec_rank_rules() {
        assert!(AttributeSpec::categorical("a", &["x"]).validate().is_err());
        assert!(AttributeSpec::categorical("a", &["x", "x"]).validate().is_err());
        assert!(AttributeSpec::ordinal("d", &["2", "4"], vec![2.0, 4.0]).validate().is_ok());
        assert!(AttributeSpec::ordinal("d", &["2", "4"], vec![4.0, 2.0]).validate().is_err());
        assert!(AttributeSpec::ordinal("d", &["2", "4"], vec![2.0]).validate().is_err());
        let mut unordered_with_ranks = AttributeSpec::categorical("a", &["x", "y"]);
        unordered_with_ranks.ranks = Some(vec![1.0, 2.0]);
        assert!(unordered_with_ranks.validate().is_err());
    }
}
