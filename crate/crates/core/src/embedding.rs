//! Superspace / subspace algebra and the affine projector.
//!
//! The superspace of dimension `N` is the direct sum of `K` attribute
//! subspaces of width `n = N / K`. Subspace `k` owns the contiguous
//! coordinate block `[k * n, (k + 1) * n)`, which is exactly the support of
//! the binary mask `M_k`.

use std::ops::Range;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Blocks with an L2 norm below this are treated as zero when normalising.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEmbeddingConfig", into = "RawEmbeddingConfig")]
pub struct EmbeddingConfig {
    superspace_dim: usize,
    num_attributes: usize,
    subspace_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawEmbeddingConfig {
    superspace_dim: usize,
    num_attributes: usize,
    subspace_dim: usize,
}

impl TryFrom<RawEmbeddingConfig> for EmbeddingConfig {
    type Error = Error;

    fn try_from(raw: RawEmbeddingConfig) -> Result<Self> {
        let config = EmbeddingConfig::new(raw.num_attributes, raw.subspace_dim)?;
        if config.superspace_dim != raw.superspace_dim {
            return Err(Error::Config(format!(
                "superspace_dim {} != {} x {}",
                raw.superspace_dim, raw.num_attributes, raw.subspace_dim
            )));
        }
        Ok(config)
    }
}

impl From<EmbeddingConfig> for RawEmbeddingConfig {
    fn from(c: EmbeddingConfig) -> Self {
        RawEmbeddingConfig {
            superspace_dim: c.superspace_dim,
            num_attributes: c.num_attributes,
            subspace_dim: c.subspace_dim,
        }
    }
}

impl EmbeddingConfig {
    pub fn new(num_attributes: usize, subspace_dim: usize) -> Result<Self> {
        if num_attributes == 0 {
            return Err(Error::Config("at least one attribute subspace is required".into()));
        }
        if subspace_dim == 0 {
            return Err(Error::Config("subspace width must be positive".into()));
        }
        let superspace_dim = num_attributes
            .checked_mul(subspace_dim)
            .ok_or_else(|| Error::Config("superspace dimension overflows".into()))?;
        Ok(EmbeddingConfig {
            superspace_dim,
            num_attributes,
            subspace_dim,
        })
    }

    /// Splits a superspace of dimension `superspace_dim` into `num_attributes`
    /// equal blocks.
    pub fn from_superspace(superspace_dim: usize, num_attributes: usize) -> Result<Self> {
        if num_attributes == 0 || !superspace_dim.is_multiple_of(num_attributes) {
            return Err(Error::Config(format!(
                "superspace dimension {superspace_dim} is not divisible by {num_attributes} attributes"
            )));
        }
        Self::new(num_attributes, superspace_dim / num_attributes)
    }

    pub fn superspace_dim(&self) -> usize {
        self.superspace_dim
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn subspace_dim(&self) -> usize {
        self.subspace_dim
    }

    /// Coordinate range of subspace `k`. Panics if `k >= K`.
    #[inline]
    pub fn block(&self, k: usize) -> Range<usize> {
        assert!(k < self.num_attributes, "attribute index {k} out of range");
        k * self.subspace_dim..(k + 1) * self.subspace_dim
    }

    pub fn checked_block(&self, k: usize) -> Result<Range<usize>> {
        if k >= self.num_attributes {
            return Err(Error::OutOfRange {
                what: "attribute index",
                index: k,
                limit: self.num_attributes,
            });
        }
        Ok(self.block(k))
    }

    /// The binary mask `M_k` as a dense 0/1 vector of length `N`.
    pub fn mask(&self, k: usize) -> Result<Vec<f64>> {
        let block = self.checked_block(k)?;
        Ok((0..self.superspace_dim)
            .map(|i| if block.contains(&i) { 1.0 } else { 0.0 })
            .collect())
    }
}

/// Returns the `n` coordinates of subspace `k`.
pub fn mask_subspace<'a>(
    embedding: &'a [f64],
    k: usize,
    config: &EmbeddingConfig,
) -> Result<&'a [f64]> {
    check_len(embedding, config.superspace_dim)?;
    Ok(&embedding[config.checked_block(k)?])
}

/// Scales every subspace block to unit L2 norm; blocks with norm below
/// [`NORM_EPSILON`] become exactly zero.
pub fn normalize_per_subspace(embedding: &[f64], config: &EmbeddingConfig) -> Vec<f64> {
    let mut out = embedding.to_vec();
    normalize_per_subspace_in_place(&mut out, config);
    out
}

pub fn normalize_per_subspace_in_place(embedding: &mut [f64], config: &EmbeddingConfig) {
    assert_eq!(embedding.len(), config.superspace_dim, "embedding length");
    for block in embedding.chunks_exact_mut(config.subspace_dim) {
        normalize_block(block);
    }
}

pub(crate) fn normalize_block(block: &mut [f64]) {
    let norm = block.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < NORM_EPSILON {
        block.fill(0.0);
    } else {
        block.iter_mut().for_each(|x| *x /= norm);
    }
}

fn check_len(v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Dimension {
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

/// Affine map `x -> W x + b` from feature space into the superspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// `N x d`.
    pub weights: Array2<f64>,
    /// Length `N`.
    pub bias: Array1<f64>,
}

impl Projector {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Dimension {
                expected: weights.nrows(),
                actual: bias.len(),
            });
        }
        Ok(Projector {
            weights: weights.as_standard_layout().into_owned(),
            bias,
        })
    }

    /// `W ~ N(0, 1/d)` coordinate-wise, `b = 0`.
    pub fn random<R: Rng + ?Sized>(output_dim: usize, feature_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (feature_dim as f64).sqrt()).expect("valid std");
        let weights =
            Array2::from_shape_simple_fn((output_dim, feature_dim), || normal.sample(rng));
        Projector {
            weights,
            bias: Array1::zeros(output_dim),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn project(&self, feature: &[f64]) -> Result<Vec<f64>> {
        check_len(feature, self.feature_dim())?;
        let mut out = vec![0.0; self.output_dim()];
        self.project_into(feature, &mut out);
        Ok(out)
    }

    /// Unchecked variant for hot loops; lengths are asserted in debug builds.
    #[inline]
    pub(crate) fn project_into(&self, feature: &[f64], out: &mut [f64]) {
        debug_assert_eq!(feature.len(), self.feature_dim());
        let w = self.weights.as_slice().expect("standard layout");
        let d = self.feature_dim();
        for ((o, row), b) in out.iter_mut().zip(w.chunks_exact(d)).zip(&self.bias) {
            *o = row.iter().zip(feature).map(|(a, x)| a * x).sum::<f64>() + b;
        }
    }
}

/// Free-function form of [`Projector::project`].
pub fn project(projector: &Projector, feature: &[f64]) -> Result<Vec<f64>> {
    projector.project(feature)
}
