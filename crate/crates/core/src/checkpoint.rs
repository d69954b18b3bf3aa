//! Binary checkpoints.
//!
//! Layout (little-endian): magic `CECK`, u32 version (1), u32 header length,
//! a UTF-8 JSON header (embedding config, label space, instance categories,
//! training metadata, tensor shapes), then f64 parameter blocks in fixed
//! order: `W` row-major, `b`, instance proxies row-major, then the value
//! proxies of each attribute in declared order.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelSpace};
use crate::embedding::{EmbeddingConfig, Projector};
use crate::error::{Error, Result};
use crate::loss::{LossWeights, ProxyStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub weights: LossWeights,
    pub sigma: f64,
    pub renormalize_missing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EmbeddingConfig,
    /// Label space seen in training; `instances` lists training instances only.
    pub label_space: LabelSpace,
    pub projector: Projector,
    pub proxies: ProxyStore,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Shapes {
    weights: [usize; 2],
    bias: usize,
    instance_proxies: [usize; 2],
    attribute_proxies: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: EmbeddingConfig,
    label_space: LabelSpace,
    instance_categories: Vec<usize>,
    metadata: TrainingMetadata,
    shapes: Shapes,
}

impl Checkpoint {
    pub fn new(
        config: EmbeddingConfig,
        label_space: LabelSpace,
        projector: Projector,
        proxies: ProxyStore,
        metadata: TrainingMetadata,
    ) -> Result<Self> {
        label_space.validate()?;
        if projector.output_dim() != config.superspace_dim() {
            return Err(Error::Checkpoint(format!(
                "shape inconsistency: projector output {} vs superspace {}",
                projector.output_dim(),
                config.superspace_dim()
            )));
        }
        proxies.check_shapes(&config, &label_space)?;
        metadata.weights.validate()?;
        Ok(Checkpoint {
            config,
            label_space,
            projector,
            proxies,
            metadata,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.projector.feature_dim()
    }

    /// Checks that a dataset can be embedded with this checkpoint.
    pub fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        if dataset.feature_dim() != self.feature_dim() {
            return Err(Error::Dataset(format!(
                "feature dimension {} does not match checkpoint ({})",
                dataset.feature_dim(),
                self.feature_dim()
            )));
        }
        if !self.label_space.same_vocabulary(dataset.label_space()) {
            return Err(Error::Dataset(
                "dataset attributes/categories differ from the checkpoint's".into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config,
            label_space: self.label_space.clone(),
            instance_categories: self.proxies.instance_category.clone(),
            metadata: self.metadata.clone(),
            shapes: Shapes {
                weights: shape2(&self.projector.weights),
                bias: self.projector.bias.len(),
                instance_proxies: shape2(&self.proxies.instance_proxies),
                attribute_proxies: self.proxies.attribute_proxies.iter().map(shape2).collect(),
            },
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |values: &mut dyn Iterator<Item = &f64>| {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&mut self.projector.weights.iter());
        put(&mut self.projector.bias.iter());
        put(&mut self.proxies.instance_proxies.iter());
        for a in &self.proxies.attribute_proxies {
            put(&mut a.iter());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 12 {
            return Err(bad("truncated file"));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("version mismatch: {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated file"))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let Header {
            config,
            label_space,
            instance_categories,
            metadata,
            shapes,
        } = header;
        label_space.validate()?;
        let big_n = config.superspace_dim();
        let feature_dim = shapes.weights[1];
        let consistent = shapes.weights[0] == big_n
            && shapes.bias == big_n
            && shapes.instance_proxies == [label_space.instances.len(), big_n]
            && instance_categories.len() == label_space.instances.len()
            && shapes.attribute_proxies.len() == label_space.num_attributes()
            && shapes
                .attribute_proxies
                .iter()
                .zip(&label_space.attributes)
                .all(|(s, a)| *s == [a.values.len(), config.subspace_dim()]);
        if !consistent || feature_dim == 0 {
            return Err(bad("shape inconsistency between header tensors and config/label space"));
        }

        let mut reader = F64Reader {
            bytes: &bytes[header_end..],
        };
        let weights = reader.matrix(big_n, feature_dim)?;
        let bias = Array1::from_vec(reader.take(big_n)?);
        let instance_proxies = reader.matrix(label_space.instances.len(), big_n)?;
        let attribute_proxies = shapes
            .attribute_proxies
            .iter()
            .map(|s| reader.matrix(s[0], s[1]))
            .collect::<Result<Vec<_>>>()?;
        if !reader.bytes.is_empty() {
            return Err(bad("trailing bytes after parameter blocks"));
        }
        let proxies = ProxyStore::new(
            instance_proxies,
            attribute_proxies,
            instance_categories,
            label_space.categories.len(),
        )
        .map_err(|e| Error::Checkpoint(format!("shape inconsistency: {e}")))?;
        Checkpoint::new(
            config,
            label_space,
            Projector::new(weights, bias)?,
            proxies,
            metadata,
        )
    }
}

fn shape2(a: &Array2<f64>) -> [usize; 2] {
    [a.nrows(), a.ncols()]
}

struct F64Reader<'a> {
    bytes: &'a [u8],
}

impl F64Reader<'_> {
    fn take(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .filter(|&len| len <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let (head, rest) = self.bytes.split_at(len);
        self.bytes = rest;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let values = self.take(rows * cols)?;
        Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
