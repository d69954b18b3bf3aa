//! Latent proxies and the cooperative proxy-softmax objective.
//!
//! Every term has the same shape: a softmax over negative squared Euclidean
//! distances between an embedding and a set of proxies, evaluated at the
//! target proxy. Instance and category terms live in the full superspace,
//! attribute terms in their own subspace block. Category proxies are never
//! stored; they are recomputed as the mean of their instances' proxies so
//! that category gradients flow back into those instance proxies.
//!
//! All gradients are exact partial derivatives, checked against central
//! finite differences in the test suite.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::data::LabelSpace;
use crate::embedding::{EmbeddingConfig, Projector};
use crate::error::{Error, Result};
use crate::squared_distance;

/// Proxy rows with a norm below this cannot enter the cosine matrix.
pub const MIN_PROXY_NORM: f64 = 1e-12;

/// Items per gradient-accumulation chunk. Fixed so that the reduction order,
/// and hence every bit of the result, does not depend on the worker count.
const CHUNK_ITEMS: usize = 8;

/// Learnable proxies. Category proxies are derived, see [`category_proxies`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyStore {
    /// `I x N`, one row per (training) instance.
    pub instance_proxies: Array2<f64>,
    /// Per attribute `k`, a `V_k x n` matrix of value proxies.
    pub attribute_proxies: Vec<Array2<f64>>,
    /// Category index of every instance.
    pub instance_category: Vec<usize>,
    pub num_categories: usize,
}

impl ProxyStore {
    pub fn new(
        instance_proxies: Array2<f64>,
        attribute_proxies: Vec<Array2<f64>>,
        instance_category: Vec<usize>,
        num_categories: usize,
    ) -> Result<Self> {
        let store = ProxyStore {
            instance_proxies: instance_proxies.as_standard_layout().into_owned(),
            attribute_proxies: attribute_proxies
                .into_iter()
                .map(|a| a.as_standard_layout().into_owned())
                .collect(),
            instance_category,
            num_categories,
        };
        if store.instance_category.len() != store.instance_proxies.nrows() {
            return Err(Error::Dimension {
                expected: store.instance_proxies.nrows(),
                actual: store.instance_category.len(),
            });
        }
        if let Some(&bad) = store.instance_category.iter().find(|&&c| c >= num_categories) {
            return Err(Error::OutOfRange {
                what: "category index",
                index: bad,
                limit: num_categories,
            });
        }
        Ok(store)
    }

    /// Instance proxies `~ N(0, 1/N)`, attribute-value proxies `~ N(0, 1/n)`.
    pub fn random<R: Rng + ?Sized>(
        config: &EmbeddingConfig,
        value_counts: &[usize],
        instance_category: Vec<usize>,
        num_categories: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if value_counts.len() != config.num_attributes() {
            return Err(Error::Dimension {
                expected: config.num_attributes(),
                actual: value_counts.len(),
            });
        }
        let big_n = config.superspace_dim();
        let n = config.subspace_dim();
        let instance_normal = Normal::new(0.0, 1.0 / (big_n as f64).sqrt()).unwrap();
        let instances = Array2::from_shape_simple_fn((instance_category.len(), big_n), || {
            instance_normal.sample(rng)
        });
        let value_normal = Normal::new(0.0, 1.0 / (n as f64).sqrt()).unwrap();
        let attributes = value_counts
            .iter()
            .map(|&v| Array2::from_shape_simple_fn((v, n), || value_normal.sample(rng)))
            .collect();
        ProxyStore::new(instances, attributes, instance_category, num_categories)
    }

    pub fn num_instances(&self) -> usize {
        self.instance_proxies.nrows()
    }

    pub fn superspace_dim(&self) -> usize {
        self.instance_proxies.ncols()
    }

    /// Checks that proxy shapes agree with an embedding layout and label space.
    pub fn check_shapes(&self, config: &EmbeddingConfig, space: &LabelSpace) -> Result<()> {
        let mismatch = |what: &str| Err(Error::Checkpoint(format!("shape inconsistency: {what}")));
        if self.instance_proxies.dim() != (space.instances.len(), config.superspace_dim()) {
            return mismatch("instance proxies vs label space / superspace");
        }
        if self.num_categories != space.categories.len() {
            return mismatch("category count");
        }
        if self.attribute_proxies.len() != space.num_attributes()
            || space.num_attributes() != config.num_attributes()
        {
            return mismatch("attribute count");
        }
        for (proxies, attribute) in self.attribute_proxies.iter().zip(&space.attributes) {
            if proxies.dim() != (attribute.values.len(), config.subspace_dim()) {
                return mismatch("attribute value proxies");
            }
        }
        Ok(())
    }

    pub fn category_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_categories];
        for &c in &self.instance_category {
            sizes[c] += 1;
        }
        sizes
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.instance_proxies.iter().all(|x| x.is_finite())
            && self
                .attribute_proxies
                .iter()
                .all(|a| a.iter().all(|x| x.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("proxy value".into()))
        }
    }
}

/// Trade-off weights of the cooperative objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub instance: f64,
    pub attribute: f64,
    pub category: f64,
    /// Weight of the squared embedding norm.
    pub embedding_reg: f64,
    /// Weight of the proxy-ordering regulariser, added once per batch.
    pub order: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            instance: 1.0,
            attribute: 1.0,
            category: 1.0,
            embedding_reg: 0.5,
            order: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.instance,
            self.attribute,
            self.category,
            self.embedding_reg,
            self.order,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

/// Gaussian-kernel proximity targets for the ordered attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingConfig {
    pub sigma: f64,
    /// `Some(P_k)` for ordered attributes.
    pub proximity: Vec<Option<Array2<f64>>>,
}

impl OrderingConfig {
    pub fn from_label_space(space: &LabelSpace, sigma: f64) -> Result<Self> {
        let proximity = space
            .attributes
            .iter()
            .map(|a| match (&a.ranks, a.ordered) {
                (Some(ranks), true) => proximity_matrix(ranks, sigma).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        Ok(OrderingConfig { sigma, proximity })
    }

    /// No ordered attributes.
    pub fn none(num_attributes: usize) -> Self {
        OrderingConfig {
            sigma: 1.0,
            proximity: vec![None; num_attributes],
        }
    }
}

/// Softmax over `-||query - p_z||^2`, evaluated at `target`.
struct SoftmaxTerm {
    loss: f64,
    probs: Vec<f64>,
}

fn softmax_term(query: &[f64], proxies: ArrayView2<'_, f64>, target: usize) -> SoftmaxTerm {
    let neg: Vec<f64> = proxies
        .rows()
        .into_iter()
        .map(|p| -squared_distance(query, p.as_slice().expect("standard layout")))
        .collect();
    let max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = neg.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    let log_sum = sum.ln();
    for p in &mut probs {
        *p /= sum;
    }
    SoftmaxTerm {
        loss: log_sum + (max - neg[target]),
        probs,
    }
}

/// Adds `scale * dL/dquery` and `scale * dL/dproxies` for a softmax term.
/// `dL/dD_z = [z == target] - s_z`, `dD_z/dq = 2 (q - p_z)`.
fn accumulate_softmax(
    term: &SoftmaxTerm,
    query: &[f64],
    proxies: ArrayView2<'_, f64>,
    target: usize,
    scale: f64,
    grad_query: &mut [f64],
    grad_proxies: &mut [f64],
) {
    let dim = query.len();
    for (z, (p, gp)) in proxies
        .rows()
        .into_iter()
        .zip(grad_proxies.chunks_exact_mut(dim))
        .enumerate()
    {
        let indicator = if z == target { 1.0 } else { 0.0 };
        let coef = 2.0 * scale * (indicator - term.probs[z]);
        if coef == 0.0 {
            continue;
        }
        let p = p.as_slice().expect("standard layout");
        for i in 0..dim {
            let diff = coef * (query[i] - p[i]);
            grad_query[i] += diff;
            gp[i] -= diff;
        }
    }
}

/// Value and gradients of one proxy-softmax term.
#[derive(Debug, Clone)]
pub struct ProxyLoss {
    pub loss: f64,
    /// Softmax probabilities over the proxy set.
    pub probabilities: Vec<f64>,
    /// Gradient with respect to the full superspace embedding.
    pub grad_embedding: Vec<f64>,
    /// Gradient with respect to the proxy set of this term.
    pub grad_proxies: Array2<f64>,
}

fn check_embedding(embedding: &[f64], dim: usize) -> Result<()> {
    if embedding.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            actual: embedding.len(),
        });
    }
    if embedding.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("embedding value".into()));
    }
    Ok(())
}

fn check_target(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index >= limit {
        return Err(Error::OutOfRange { what, index, limit });
    }
    Ok(())
}

fn single_term(
    query: &[f64],
    proxies: ArrayView2<'_, f64>,
    target: usize,
    embed_dim: usize,
    offset: usize,
) -> ProxyLoss {
    let term = softmax_term(query, proxies, target);
    let mut grad_query = vec![0.0; query.len()];
    let mut grad_proxies = Array2::zeros(proxies.dim());
    accumulate_softmax(
        &term,
        query,
        proxies,
        target,
        1.0,
        &mut grad_query,
        grad_proxies.as_slice_mut().unwrap(),
    );
    let mut grad_embedding = vec![0.0; embed_dim];
    grad_embedding[offset..offset + query.len()].copy_from_slice(&grad_query);
    ProxyLoss {
        loss: term.loss,
        probabilities: term.probs,
        grad_embedding,
        grad_proxies,
    }
}

/// Instance term: softmax over all instance proxies in the superspace.
pub fn instance_loss(embedding: &[f64], target: usize, store: &ProxyStore) -> Result<ProxyLoss> {
    check_embedding(embedding, store.superspace_dim())?;
    check_target("instance index", target, store.num_instances())?;
    store.check_finite()?;
    let n = embedding.len();
    Ok(single_term(embedding, store.instance_proxies.view(), target, n, 0))
}

/// Attribute term for attribute `k`: softmax over that attribute's value
/// proxies using distances inside block `k` only.
pub fn attribute_loss(
    embedding: &[f64],
    k: usize,
    target_value: usize,
    store: &ProxyStore,
    config: &EmbeddingConfig,
) -> Result<ProxyLoss> {
    check_embedding(embedding, config.superspace_dim())?;
    let block = config.checked_block(k)?;
    let proxies = store.attribute_proxies.get(k).ok_or(Error::OutOfRange {
        what: "attribute index",
        index: k,
        limit: store.attribute_proxies.len(),
    })?;
    if proxies.nrows() < 2 {
        return Err(Error::Config(format!("attribute {k} has fewer than 2 values")));
    }
    check_target("attribute value index", target_value, proxies.nrows())?;
    store.check_finite()?;
    Ok(single_term(
        &embedding[block.clone()],
        proxies.view(),
        target_value,
        embedding.len(),
        block.start,
    ))
}

/// Category proxies: mean of the instance proxies of each category.
pub fn category_proxies(store: &ProxyStore) -> Result<Array2<f64>> {
    let sizes = store.category_sizes();
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyCategory(format!("category index {empty} has no instance")));
    }
    let mut centers = Array2::zeros((store.num_categories, store.superspace_dim()));
    for (p, &c) in store
        .instance_proxies
        .axis_iter(Axis(0))
        .zip(&store.instance_category)
    {
        let mut row = centers.row_mut(c);
        row += &p;
    }
    for (mut row, &size) in centers.axis_iter_mut(Axis(0)).zip(&sizes) {
        row /= size as f64;
    }
    Ok(centers)
}

/// Pushes gradients on category centers back onto instance proxies
/// through the mean.
fn distribute_center_grads(store: &ProxyStore, grad_centers: &Array2<f64>, out: &mut Array2<f64>) {
    let sizes = store.category_sizes();
    for (mut g, &c) in out.axis_iter_mut(Axis(0)).zip(&store.instance_category) {
        let scale = 1.0 / sizes[c] as f64;
        g.scaled_add(scale, &grad_centers.row(c));
    }
}

#[derive(Debug, Clone)]
pub struct CategoryLoss {
    pub loss: f64,
    pub probabilities: Vec<f64>,
    pub grad_embedding: Vec<f64>,
    /// Gradient with respect to the derived category centers (`C x N`).
    pub grad_centers: Array2<f64>,
    /// The same gradient pulled back onto the instance proxies (`I x N`).
    pub grad_instance_proxies: Array2<f64>,
}

/// Category term: softmax over the derived category proxies.
pub fn category_loss(
    embedding: &[f64],
    target_category: usize,
    store: &ProxyStore,
) -> Result<CategoryLoss> {
    check_embedding(embedding, store.superspace_dim())?;
    check_target("category index", target_category, store.num_categories)?;
    store.check_finite()?;
    let centers = category_proxies(store)?;
    let term = single_term(
        embedding,
        centers.view(),
        target_category,
        embedding.len(),
        0,
    );
    let mut grad_instance_proxies = Array2::zeros(store.instance_proxies.dim());
    distribute_center_grads(store, &term.grad_proxies, &mut grad_instance_proxies);
    Ok(CategoryLoss {
        loss: term.loss,
        probabilities: term.probabilities,
        grad_embedding: term.grad_embedding,
        grad_centers: term.grad_proxies,
        grad_instance_proxies,
    })
}

/// `P_vu = exp(-(r_v - r_u)^2 / (2 sigma^2))`.
pub fn proximity_matrix(ranks: &[f64], sigma: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if ranks.len() < 2 {
        return Err(Error::Config("proximity matrix needs at least 2 ranks".into()));
    }
    let denom = 2.0 * sigma * sigma;
    Ok(Array2::from_shape_fn((ranks.len(), ranks.len()), |(v, u)| {
        let d = ranks[v] - ranks[u];
        (-(d * d) / denom).exp()
    }))
}

/// `||S - P||_F` where `S` is the cosine-similarity matrix of the proxy rows,
/// with its gradient with respect to the proxies (zero where `S = P`).
pub fn order_regularizer(proxies: &Array2<f64>, proximity: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let v = proxies.nrows();
    if proximity.dim() != (v, v) {
        return Err(Error::Dimension {
            expected: v,
            actual: proximity.nrows(),
        });
    }
    let norms: Vec<f64> = proxies
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt())
        .collect();
    if let Some(bad) = norms.iter().position(|&n| n.is_nan() || n < MIN_PROXY_NORM) {
        return Err(Error::NonFinite(format!(
            "cosine similarity: proxy row {bad} has (near) zero norm"
        )));
    }
    let mut unit = proxies.to_owned();
    for (mut row, &n) in unit.axis_iter_mut(Axis(0)).zip(&norms) {
        row /= n;
    }
    let cosine = unit.dot(&unit.t());
    let diff = &cosine - proximity;
    let value = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    let mut grad = Array2::zeros(proxies.dim());
    if value == 0.0 {
        return Ok((value, grad));
    }
    // dR/dU = 2 (D / R) U for symmetric D; then through u_v = a_v / |a_v|.
    let grad_unit = diff.dot(&unit) * (2.0 / value);
    for r in 0..v {
        let g = grad_unit.row(r);
        let u = unit.row(r);
        let along = g.dot(&u);
        let mut out = grad.row_mut(r);
        for i in 0..u.len() {
            out[i] = (g[i] - along * u[i]) / norms[r];
        }
    }
    Ok((value, grad))
}

/// Per-item loss terms before weighting. Terms that were not evaluated
/// (zero weight) are `0.0`; non-exhibited attributes are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTerms {
    pub instance: f64,
    pub attributes: Vec<Option<f64>>,
    pub category: f64,
    pub embedding_sq_norm: f64,
}

impl ItemTerms {
    /// Denominator of the attribute sum: `K`, or the number of exhibited
    /// attributes when renormalising.
    pub fn attribute_denominator(&self, renormalize_missing: bool) -> f64 {
        if renormalize_missing {
            self.attributes.iter().flatten().count().max(1) as f64
        } else {
            self.attributes.len() as f64
        }
    }

    /// Weighted per-item loss: instance + (attribute / K) * sum over
    /// exhibited attributes + category + embedding-norm regulariser.
    pub fn combine(&self, weights: &LossWeights, renormalize_missing: bool) -> f64 {
        let attribute_sum: f64 = self.attributes.iter().flatten().sum();
        let attribute_scale = weights.attribute / self.attribute_denominator(renormalize_missing);
        weights.instance * self.instance
            + attribute_scale * attribute_sum
            + weights.category * self.category
            + weights.embedding_reg * self.embedding_sq_norm
    }
}

/// One training image as seen by the objective.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub feature: &'a [f64],
    /// Row of the instance proxy matrix.
    pub instance: usize,
    pub category: usize,
    pub attributes: &'a [Option<usize>],
}

/// Gradients for every learnable tensor, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub instance_proxies: Array2<f64>,
    pub attribute_proxies: Vec<Array2<f64>>,
}

impl Gradients {
    fn zeros(projector: &Projector, store: &ProxyStore) -> Self {
        Gradients {
            weights: Array2::zeros(projector.weights.dim()),
            bias: Array1::zeros(projector.bias.len()),
            instance_proxies: Array2::zeros(store.instance_proxies.dim()),
            attribute_proxies: store
                .attribute_proxies
                .iter()
                .map(|a| Array2::zeros(a.dim()))
                .collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        self.weights *= s;
        self.bias *= s;
        self.instance_proxies *= s;
        for a in &mut self.attribute_proxies {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|x| x.is_finite())
            && self.bias.iter().all(|x| x.is_finite())
            && self.instance_proxies.iter().all(|x| x.is_finite())
            && self
                .attribute_proxies
                .iter()
                .all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// Partial sums for one chunk of a batch.
struct ChunkSums {
    loss: f64,
    grads: Gradients,
    centers: Array2<f64>,
}

impl ChunkSums {
    fn add(&mut self, other: &ChunkSums) {
        self.loss += other.loss;
        self.grads.weights += &other.grads.weights;
        self.grads.bias += &other.grads.bias;
        self.grads.instance_proxies += &other.grads.instance_proxies;
        for (a, b) in self
            .grads
            .attribute_proxies
            .iter_mut()
            .zip(&other.grads.attribute_proxies)
        {
            *a += b;
        }
        self.centers += &other.centers;
    }
}

/// The full training objective: weighted cooperative loss, averaged over a
/// batch, plus the ordering regulariser once per batch.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub weights: LossWeights,
    pub ordering: &'a OrderingConfig,
    pub config: EmbeddingConfig,
    /// Divide the attribute sum by the number of exhibited attributes
    /// instead of `K`.
    pub renormalize_missing: bool,
}

impl Objective<'_> {
    /// Loss terms and embedding gradient of one item. Accumulates proxy and
    /// center gradients into `sums`.
    fn item(
        &self,
        example: &Example<'_>,
        projector: &Projector,
        store: &ProxyStore,
        centers: Option<&Array2<f64>>,
        embedding: &mut [f64],
        grad_embedding: &mut [f64],
        sums: &mut ChunkSums,
    ) -> Result<ItemTerms> {
        let w = &self.weights;
        projector.project_into(example.feature, embedding);
        if embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding value".into()));
        }
        grad_embedding.fill(0.0);

        let mut terms = ItemTerms {
            instance: 0.0,
            attributes: vec![None; self.config.num_attributes()],
            category: 0.0,
            embedding_sq_norm: embedding.iter().map(|x| x * x).sum(),
        };

        if w.instance != 0.0 {
            let proxies = store.instance_proxies.view();
            let term = softmax_term(embedding, proxies, example.instance);
            accumulate_softmax(
                &term,
                embedding,
                proxies,
                example.instance,
                w.instance,
                grad_embedding,
                sums.grads.instance_proxies.as_slice_mut().unwrap(),
            );
            terms.instance = term.loss;
        }

        if w.attribute != 0.0 {
            let attribute_terms: Vec<(usize, usize, SoftmaxTerm)> = example
                .attributes
                .iter()
                .enumerate()
                .filter_map(|(k, value)| value.map(|v| (k, v)))
                .map(|(k, v)| {
                    let query = &embedding[self.config.block(k)];
                    (k, v, softmax_term(query, store.attribute_proxies[k].view(), v))
                })
                .collect();
            for (k, _, term) in &attribute_terms {
                terms.attributes[*k] = Some(term.loss);
            }
            let scale = w.attribute / terms.attribute_denominator(self.renormalize_missing);
            for (k, v, term) in &attribute_terms {
                let block = self.config.block(*k);
                accumulate_softmax(
                    term,
                    &embedding[block.clone()],
                    store.attribute_proxies[*k].view(),
                    *v,
                    scale,
                    &mut grad_embedding[block],
                    sums.grads.attribute_proxies[*k].as_slice_mut().unwrap(),
                );
            }
        }

        if w.category != 0.0 {
            let centers = centers.expect("centers computed when category weight is set");
            let term = softmax_term(embedding, centers.view(), example.category);
            accumulate_softmax(
                &term,
                embedding,
                centers.view(),
                example.category,
                w.category,
                grad_embedding,
                sums.centers.as_slice_mut().unwrap(),
            );
            terms.category = term.loss;
        }

        for (g, e) in grad_embedding.iter_mut().zip(embedding.iter()) {
            *g += 2.0 * w.embedding_reg * e;
        }

        let d = example.feature.len();
        let gw = sums.grads.weights.as_slice_mut().unwrap();
        for ((row, &g), gb) in gw
            .chunks_exact_mut(d)
            .zip(grad_embedding.iter())
            .zip(sums.grads.bias.iter_mut())
        {
            if g == 0.0 {
                continue;
            }
            for (r, x) in row.iter_mut().zip(example.feature) {
                *r += g * x;
            }
            *gb += g;
        }

        Ok(terms)
    }

    fn chunk(
        &self,
        batch: &[Example<'_>],
        projector: &Projector,
        store: &ProxyStore,
        centers: Option<&Array2<f64>>,
    ) -> Result<ChunkSums> {
        let mut sums = ChunkSums {
            loss: 0.0,
            grads: Gradients::zeros(projector, store),
            centers: Array2::zeros((store.num_categories, store.superspace_dim())),
        };
        let n = projector.output_dim();
        let mut embedding = vec![0.0; n];
        let mut grad_embedding = vec![0.0; n];
        for example in batch {
            let terms = self.item(
                example,
                projector,
                store,
                centers,
                &mut embedding,
                &mut grad_embedding,
                &mut sums,
            )?;
            sums.loss += terms.combine(&self.weights, self.renormalize_missing);
        }
        Ok(sums)
    }

    fn validate_batch(
        &self,
        batch: &[Example<'_>],
        projector: &Projector,
        store: &ProxyStore,
    ) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        self.weights.validate()?;
        let big_n = self.config.superspace_dim();
        if projector.output_dim() != big_n || store.superspace_dim() != big_n {
            return Err(Error::Dimension {
                expected: big_n,
                actual: projector.output_dim(),
            });
        }
        if store.attribute_proxies.len() != self.config.num_attributes()
            || self.ordering.proximity.len() != self.config.num_attributes()
        {
            return Err(Error::Dimension {
                expected: self.config.num_attributes(),
                actual: store.attribute_proxies.len(),
            });
        }
        store.check_finite()?;
        for ex in batch {
            if ex.feature.len() != projector.feature_dim() {
                return Err(Error::Dimension {
                    expected: projector.feature_dim(),
                    actual: ex.feature.len(),
                });
            }
            check_target("instance index", ex.instance, store.num_instances())?;
            check_target("category index", ex.category, store.num_categories)?;
            if ex.attributes.len() != self.config.num_attributes() {
                return Err(Error::Dimension {
                    expected: self.config.num_attributes(),
                    actual: ex.attributes.len(),
                });
            }
            for (k, v) in ex.attributes.iter().enumerate() {
                if let Some(v) = *v {
                    check_target("attribute value index", v, store.attribute_proxies[k].nrows())?;
                }
            }
        }
        Ok(())
    }

    /// Per-item terms without gradients (used for diagnostics and tests).
    pub fn item_terms(
        &self,
        example: &Example<'_>,
        projector: &Projector,
        store: &ProxyStore,
    ) -> Result<ItemTerms> {
        self.validate_batch(std::slice::from_ref(example), projector, store)?;
        let centers = if self.weights.category != 0.0 {
            Some(category_proxies(store)?)
        } else {
            None
        };
        let mut sums = ChunkSums {
            loss: 0.0,
            grads: Gradients::zeros(projector, store),
            centers: Array2::zeros((store.num_categories, store.superspace_dim())),
        };
        let n = projector.output_dim();
        self.item(
            example,
            projector,
            store,
            centers.as_ref(),
            &mut vec![0.0; n],
            &mut vec![0.0; n],
            &mut sums,
        )
    }

    /// Batch loss and exact gradients. With a thread pool, chunks are
    /// evaluated in parallel; the result is bit-identical to the serial one.
    pub fn loss_and_grad(
        &self,
        batch: &[Example<'_>],
        projector: &Projector,
        store: &ProxyStore,
        pool: Option<&ThreadPool>,
    ) -> Result<(f64, Gradients)> {
        self.validate_batch(batch, projector, store)?;
        let centers = if self.weights.category != 0.0 {
            Some(category_proxies(store)?)
        } else {
            None
        };
        let centers = centers.as_ref();
        let chunks: Vec<&[Example<'_>]> = batch.chunks(CHUNK_ITEMS).collect();
        let partials: Vec<Result<ChunkSums>> = match pool {
            Some(pool) if chunks.len() > 1 => pool.install(|| {
                chunks
                    .par_iter()
                    .map(|c| self.chunk(c, projector, store, centers))
                    .collect()
            }),
            _ => chunks
                .iter()
                .map(|c| self.chunk(c, projector, store, centers))
                .collect(),
        };
        let mut partials = partials.into_iter();
        let mut total = partials.next().expect("batch is non-empty")?;
        for p in partials {
            total.add(&p?);
        }

        let inv = 1.0 / batch.len() as f64;
        let mut loss = total.loss * inv;
        let mut grads = total.grads;
        grads.scale(inv);
        if centers.is_some() {
            total.centers *= inv;
            distribute_center_grads(store, &total.centers, &mut grads.instance_proxies);
        }

        if self.weights.order != 0.0 {
            let mut order_sum = 0.0;
            for (k, p) in self.ordering.proximity.iter().enumerate() {
                if let Some(p) = p {
                    let (value, g) = order_regularizer(&store.attribute_proxies[k], p)?;
                    order_sum += value;
                    grads.attribute_proxies[k].scaled_add(self.weights.order, &g);
                }
            }
            loss += self.weights.order * order_sum;
        }

        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss ({loss})")));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok((loss, grads))
    }
}

/// Free-function form of [`Objective::loss_and_grad`], single-threaded.
pub fn total_loss_and_grad(
    batch: &[Example<'_>],
    projector: &Projector,
    store: &ProxyStore,
    weights: LossWeights,
    ordering: &OrderingConfig,
    config: EmbeddingConfig,
) -> Result<(f64, Gradients)> {
    Objective {
        weights,
        ordering,
        config,
        renormalize_missing: false,
    }
    .loss_and_grad(batch, projector, store, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Neumaier-compensated sum.
    fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for v in values {
            let t = sum + v;
            if sum.abs() >= v.abs() {
                comp += (sum - t) + v;
            } else {
                comp += (v - t) + sum;
            }
            sum = t;
        }
        sum + comp
    }

    /// Straight-line softmax cross-entropy: no max shift, compensated sums.
    fn naive_softmax_loss(query: &[f64], proxies: &[Vec<f64>], target: usize) -> f64 {
        let dist = |p: &Vec<f64>| compensated_sum(query.iter().zip(p).map(|(a, b)| (a - b) * (a - b)));
        let numerator = (-dist(&proxies[target])).exp();
        let denominator = compensated_sum(proxies.iter().map(|p| (-dist(p)).exp()));
        -(numerator / denominator).ln()
    }

    fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
        m.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-scale..scale))
    }

    fn store(instances: Array2<f64>, attributes: Vec<Array2<f64>>, cats: Vec<usize>, c: usize) -> ProxyStore {
        ProxyStore::new(instances, attributes, cats, c).unwrap()
    }

    #[test]
    fn instance_loss_closed_forms() {
        let s = store(array![[1.0, 0.0], [0.0, 1.0]], vec![], vec![0, 0], 1);
        let l = instance_loss(&[0.0, 0.0], 0, &s).unwrap();
        assert_abs_diff_eq!(l.loss, 2f64.ln(), epsilon = 1e-15);
        let l = instance_loss(&[1.0, 0.0], 0, &s).unwrap();
        assert_abs_diff_eq!(l.loss, (1.0 + (-2f64).exp()).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(l.loss, 0.126928, epsilon = 1e-6);
        assert!(instance_loss(&[1.0, 0.0], 2, &s).is_err());
        assert!(instance_loss(&[f64::NAN, 0.0], 0, &s).is_err());
        assert!(instance_loss(&[1.0], 0, &s).is_err());
    }

    #[test]
    fn instance_loss_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let p = random_matrix(&mut rng, 7, 6, 1.0);
            let e: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = rng.random_range(0..7);
            let s = store(p.clone(), vec![], vec![0; 7], 1);
            let got = instance_loss(&e, target, &s).unwrap();
            let want = naive_softmax_loss(&e, &rows(&p), target);
            assert!((got.loss - want).abs() <= 1e-12, "{} vs {}", got.loss, want);
            assert!((got.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn attribute_loss_examples_and_locality() {
        let config = EmbeddingConfig::new(2, 2).unwrap();
        let s = store(
            Array2::zeros((1, 4)),
            vec![array![[1.0, 0.0], [0.0, 1.0]], array![[0.0, 0.0], [1.0, 1.0]]],
            vec![0],
            1,
        );
        for tail in [[0.0, 0.0], [5.0, -3.0], [1e3, 7.0]] {
            let e = [1.0, 0.0, tail[0], tail[1]];
            let l = attribute_loss(&e, 0, 0, &s, &config).unwrap();
            assert_abs_diff_eq!(l.loss, (1.0 + (-2f64).exp()).ln(), epsilon = 1e-15);
            assert_eq!(&l.grad_embedding[2..], &[0.0, 0.0]);
        }
        let s3 = store(
            Array2::zeros((1, 4)),
            vec![array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]], array![[0.0, 0.0], [1.0, 1.0]]],
            vec![0],
            1,
        );
        let l = attribute_loss(&[0.0; 4], 0, 2, &s3, &config).unwrap();
        assert_abs_diff_eq!(l.loss, 3f64.ln(), epsilon = 1e-15);
        assert!(attribute_loss(&[0.0; 4], 2, 0, &s3, &config).is_err());
        assert!(attribute_loss(&[0.0; 4], 0, 3, &s3, &config).is_err());
    }

    #[test]
    fn attribute_loss_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = EmbeddingConfig::new(3, 4).unwrap();
        for _ in 0..20 {
            let attrs: Vec<Array2<f64>> = (0..3).map(|k| random_matrix(&mut rng, 2 + k, 4, 1.0)).collect();
            let s = store(Array2::zeros((1, 12)), attrs.clone(), vec![0], 1);
            let e: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(0..3);
            let v = rng.random_range(0..2 + k);
            let got = attribute_loss(&e, k, v, &s, &config).unwrap();
            let want = naive_softmax_loss(&e[config.block(k)], &rows(&attrs[k]), v);
            assert!((got.loss - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn category_proxies_are_means() {
        let s = store(array![[0.0, 0.0], [2.0, 2.0], [5.0, -1.0]], vec![], vec![0, 0, 1], 2);
        let c = category_proxies(&s).unwrap();
        assert_eq!(c, array![[1.0, 1.0], [5.0, -1.0]]);
        let scaled = store(s.instance_proxies.clone() * 3.0, vec![], vec![0, 0, 1], 2);
        assert_eq!(category_proxies(&scaled).unwrap(), c * 3.0);
        let empty = store(array![[0.0, 0.0]], vec![], vec![0], 2);
        assert!(matches!(category_proxies(&empty), Err(Error::EmptyCategory(_))));
    }

    #[test]
    fn category_loss_closed_forms() {
        // Two equidistant centers.
        let s = store(array![[1.0, 0.0], [-1.0, 0.0]], vec![], vec![0, 1], 2);
        assert_abs_diff_eq!(category_loss(&[0.0, 0.0], 0, &s).unwrap().loss, 2f64.ln(), epsilon = 1e-15);
        // On the target center, the other at squared distance 4.
        let s = store(array![[0.0, 0.0], [1.0, 1.0], [3.0, 3.0]], vec![], vec![0, 1, 1], 2);
        let l = category_loss(&[0.0, 0.0], 0, &s).unwrap();
        assert_abs_diff_eq!(l.loss, (1.0 + (-8f64).exp()).ln(), epsilon = 1e-15);
        let s = store(array![[0.0, 0.0], [2.0, 0.0]], vec![], vec![0, 1], 2);
        let l = category_loss(&[0.0, 0.0], 0, &s).unwrap();
        assert_abs_diff_eq!(l.loss, (1.0 + (-4f64).exp()).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(l.loss, 0.018150, epsilon = 1e-6);
    }

    #[test]
    fn category_loss_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let cats: Vec<usize> = (0..9).map(|i| i % 5).collect();
            let s = store(random_matrix(&mut rng, 9, 4, 1.0), vec![], cats, 5);
            let e: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = rng.random_range(0..5);
            let got = category_loss(&e, target, &s).unwrap();
            let want = naive_softmax_loss(&e, &rows(&category_proxies(&s).unwrap()), target);
            assert!((got.loss - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_stable_for_huge_distances() {
        let s = store(array![[1e3, 0.0], [0.0, 0.0], [-1e3, 0.0]], vec![], vec![0, 0, 0], 1);
        for target in 0..3 {
            let l = instance_loss(&[0.0, 0.0], target, &s).unwrap();
            assert!(l.loss.is_finite() && l.loss >= 0.0);
            assert!(l.grad_embedding.iter().all(|g| g.is_finite()));
        }
        let l = instance_loss(&[0.0, 0.0], 0, &s).unwrap();
        assert_abs_diff_eq!(l.loss, 1e6, epsilon = 1e-6);
    }

    #[test]
    fn proximity_examples() {
        let p = proximity_matrix(&[1.0, 2.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[[0, 1]], (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(p[[0, 1]], 0.606531, epsilon = 1e-6);
        let p = proximity_matrix(&[1.0, 3.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[[1, 0]], 0.135335, epsilon = 1e-6);
        let p = proximity_matrix(&[0.0, 1.5, 4.0, 9.0], 2.0).unwrap();
        for v in 0..4 {
            assert_eq!(p[[v, v]], 1.0);
            for u in 0..4 {
                assert_eq!(p[[v, u]], p[[u, v]]);
                assert!(p[[v, u]] > 0.0 && p[[v, u]] <= 1.0);
            }
        }
        assert!(proximity_matrix(&[1.0, 2.0], 0.0).is_err());
        assert!(proximity_matrix(&[1.0], 1.0).is_err());
    }

    #[test]
    fn order_regularizer_examples() {
        let ortho = array![[1.0, 0.0], [0.0, 2.0]];
        let p = array![[1.0, 0.6], [0.6, 1.0]];
        let (value, _) = order_regularizer(&ortho, &p).unwrap();
        assert_abs_diff_eq!(value, (2.0 * 0.36f64).sqrt(), epsilon = 1e-15);
        // Proxies whose cosine matrix is P.
        let theta = 0.6f64.acos();
        let matched = array![[1.0, 0.0], [3.0 * theta.cos(), 3.0 * theta.sin()]];
        let (value, grad) = order_regularizer(&matched, &p).unwrap();
        assert!(value < 1e-15);
        assert!(grad.iter().all(|g| g.abs() < 1e-6));
        let exact = order_regularizer(&array![[1.0, 0.0], [0.0, 1.0]], &Array2::eye(2)).unwrap();
        assert_eq!(exact.0, 0.0);
        assert!(exact.1.iter().all(|&g| g == 0.0));
        assert!(order_regularizer(&array![[0.0, 0.0], [1.0, 0.0]], &p).is_err());
    }

    #[test]
    fn order_regularizer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 4, 3, 1.0);
            let p = proximity_matrix(&[1.0, 2.0, 3.0, 4.0], 1.0).unwrap();
            let (_, grad) = order_regularizer(&a, &p).unwrap();
            let h = 1e-6;
            let mut max_rel = 0.0f64;
            for idx in 0..a.len() {
                let (r, c) = (idx / 3, idx % 3);
                let mut plus = a.clone();
                plus[[r, c]] += h;
                let mut minus = a.clone();
                minus[[r, c]] -= h;
                let fd = (order_regularizer(&plus, &p).unwrap().0 - order_regularizer(&minus, &p).unwrap().0)
                    / (2.0 * h);
                let rel = (fd - grad[[r, c]]).abs() / fd.abs().max(grad[[r, c]].abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel <= 1e-5, "max relative error {max_rel}");
        }
    }

    #[test]
    fn combine_weights_missing_attributes() {
        let w = LossWeights {
            instance: 1.0,
            attribute: 1.0,
            category: 1.0,
            embedding_reg: 0.5,
            order: 1.0,
        };
        let one = ItemTerms {
            instance: 0.7,
            attributes: vec![Some(0.3)],
            category: 0.2,
            embedding_sq_norm: 4.0,
        };
        assert_abs_diff_eq!(one.combine(&w, false), 3.2, epsilon = 1e-12);
        let two = ItemTerms {
            attributes: vec![Some(0.3), None],
            ..one.clone()
        };
        assert_abs_diff_eq!(two.combine(&w, false), 3.05, epsilon = 1e-12);
        assert_abs_diff_eq!(two.combine(&w, true), 3.2, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_parameters_give_log_set_sizes() {
        // Everything collapsed to the origin: every softmax is uniform.
        let config = EmbeddingConfig::new(2, 3).unwrap();
        let s = store(
            Array2::zeros((5, 6)),
            vec![Array2::zeros((4, 3)), Array2::zeros((2, 3))],
            vec![0, 1, 2, 0, 1],
            3,
        );
        let e = [0.0; 6];
        assert_abs_diff_eq!(instance_loss(&e, 3, &s).unwrap().loss, 5f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(attribute_loss(&e, 0, 1, &s, &config).unwrap().loss, 4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(attribute_loss(&e, 1, 0, &s, &config).unwrap().loss, 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(category_loss(&e, 2, &s).unwrap().loss, 3f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let config = EmbeddingConfig::new(1, 2).unwrap();
        let projector = Projector::new(Array2::zeros((2, 2)), Array1::zeros(2)).unwrap();
        let s = store(Array2::zeros((1, 2)), vec![Array2::ones((2, 2))], vec![0], 1);
        let ordering = OrderingConfig::none(1);
        assert!(total_loss_and_grad(&[], &projector, &s, LossWeights::default(), &ordering, config).is_err());
    }

    proptest! {
        #[test]
        fn translation_invariance(seed in 0u64..500, shift in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_matrix(&mut rng, 5, 4, 2.0);
            let e: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let base = instance_loss(&e, 2, &store(p.clone(), vec![], vec![0; 5], 1)).unwrap().loss;
            let shifted_p = &p + &Array1::from_vec(shift.clone());
            let shifted_e: Vec<f64> = e.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let moved = instance_loss(&shifted_e, 2, &store(shifted_p, vec![], vec![0; 5], 1)).unwrap().loss;
            prop_assert!((base - moved).abs() <= 1e-9);
        }

        #[test]
        fn losses_are_non_negative_and_probabilities_sum_to_one(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = store(random_matrix(&mut rng, 6, 3, 3.0), vec![], vec![0, 1, 0, 1, 2, 2], 3);
            let e: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            for t in 0..6 {
                let l = instance_loss(&e, t, &s).unwrap();
                prop_assert!(l.loss >= 0.0);
                prop_assert!((l.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            for t in 0..3 {
                let l = category_loss(&e, t, &s).unwrap();
                prop_assert!(l.loss >= 0.0);
                prop_assert!((l.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
