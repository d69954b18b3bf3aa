//! Retrieval metrics over per-subspace normalised embeddings.
//!
//! Rankings order candidates by squared Euclidean distance with ties broken
//! by ascending index; squared and plain distances induce the same order.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Split};
use crate::embedding::{normalize_per_subspace_in_place, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::loss::{order_regularizer, proximity_matrix};
use crate::squared_distance;

/// Embedded items of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub config: EmbeddingConfig,
    pub split: Split,
    pub item_ids: Vec<String>,
    /// Per-subspace normalised embeddings, one row per item.
    pub embeddings: Array2<f64>,
    /// Projector outputs before normalisation.
    pub raw_embeddings: Array2<f64>,
    /// Dataset-level instance indices.
    pub instances: Vec<usize>,
    pub categories: Vec<usize>,
    pub attributes: Vec<Vec<Option<usize>>>,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i).to_slice().unwrap()
    }

    pub fn raw_embedding(&self, i: usize) -> &[f64] {
        self.raw_embeddings.row(i).to_slice().unwrap()
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.item_ids.iter().position(|id| id == item_id)
    }

    /// Indices of entries labelled with `term`.
    pub fn members(&self, term: Term) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.exhibits(i, term)).collect()
    }

    pub fn exhibits(&self, i: usize, term: Term) -> bool {
        match term {
            Term::Category(y) => self.categories[i] == y,
            Term::AttributeValue { attribute, value } => {
                self.attributes[i].get(attribute).copied().flatten() == Some(value)
            }
        }
    }

    /// Coordinates a term ranks on: block `k` for attribute terms, everything
    /// for categories.
    pub fn view(&self, i: usize, term: Term) -> &[f64] {
        let e = self.embedding(i);
        match term {
            Term::Category(_) => e,
            Term::AttributeValue { attribute, .. } => &e[self.config.block(attribute)],
        }
    }
}

/// Projects and normalises every item of `split`.
pub fn build_index(checkpoint: &Checkpoint, dataset: &Dataset, split: Split) -> Result<RetrievalIndex> {
    checkpoint.check_compatible(dataset)?;
    let items: Vec<_> = dataset.split_items(split).map(|(_, item)| item).collect();
    if items.is_empty() {
        return Err(Error::Dataset(format!("the {split} split is empty")));
    }
    let n = checkpoint.config.superspace_dim();
    let mut raw = Array2::zeros((items.len(), n));
    for (row, item) in raw.rows_mut().into_iter().zip(&items) {
        checkpoint
            .projector
            .project_into(dataset.feature(item), row.into_slice().unwrap());
    }
    let mut embeddings = raw.clone();
    for row in embeddings.rows_mut() {
        normalize_per_subspace_in_place(row.into_slice().unwrap(), &checkpoint.config);
    }
    Ok(RetrievalIndex {
        config: checkpoint.config,
        split,
        item_ids: items.iter().map(|i| i.item_id.clone()).collect(),
        embeddings,
        raw_embeddings: raw,
        instances: items.iter().map(|i| i.instance).collect(),
        categories: items.iter().map(|i| i.category).collect(),
        attributes: items.iter().map(|i| i.attributes.clone()).collect(),
    })
}

/// Candidate indices sorted by distance to `query`, ties by index.
pub fn rank_by_distance<'a>(query: &[f64], candidates: impl Iterator<Item = &'a [f64]>) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates
        .enumerate()
        .map(|(i, c)| (squared_distance(query, c), i))
        .collect();
    scored.sort_by(|a, b| cmp_scored(*a, *b));
    scored.into_iter().map(|(_, i)| i).collect()
}

fn cmp_scored(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Fraction of queries with an item of the same instance among their `k`
/// nearest gallery entries.
pub fn recall_at_k(queries: &RetrievalIndex, gallery: &RetrievalIndex, k: usize) -> Result<f64> {
    if gallery.is_empty() || queries.is_empty() {
        return Err(Error::Dataset("recall needs non-empty query and gallery sets".into()));
    }
    if k == 0 || k > gallery.len() {
        return Err(Error::Config(format!(
            "k must lie in 1..={}, got {k}",
            gallery.len()
        )));
    }
    let mut hits = 0usize;
    let mut scored = Vec::with_capacity(gallery.len());
    for q in 0..queries.len() {
        let query = queries.embedding(q);
        scored.clear();
        scored.extend((0..gallery.len()).map(|g| (squared_distance(query, gallery.embedding(g)), g)));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| cmp_scored(*a, *b));
        }
        if scored[..k]
            .iter()
            .any(|&(_, g)| gallery.instances[g] == queries.instances[q])
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Non-interpolated average precision: the mean, over relevant positions
/// `j` (1-based), of the precision of the first `j` results. `None` when
/// nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (j, &rel) in relevance.iter().enumerate() {
        if rel {
            found += 1;
            sum += found as f64 / (j + 1) as f64;
        }
    }
    (found > 0).then(|| sum / found as f64)
}

/// A retrieval query that is not an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    AttributeValue { attribute: usize, value: usize },
    Category(usize),
}

/// Mean of the normalised embeddings at `members`, renormalised per
/// subspace. Attribute terms keep only their block.
pub fn term_center(index: &RetrievalIndex, members: &[usize], term: Term) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(Error::Dataset(format!("no item exhibits {term:?}")));
    }
    let mut center = vec![0.0; index.config.superspace_dim()];
    for &i in members {
        for (c, x) in center.iter_mut().zip(index.embedding(i)) {
            *c += x;
        }
    }
    let count = members.len() as f64;
    center.iter_mut().for_each(|c| *c /= count);
    normalize_per_subspace_in_place(&mut center, &index.config);
    if let Term::AttributeValue { attribute, .. } = term {
        let keep = index.config.checked_block(attribute)?;
        for (j, c) in center.iter_mut().enumerate() {
            if !keep.contains(&j) {
                *c = 0.0;
            }
        }
    }
    Ok(center)
}

/// Query vector for `term` averaged over the train items that exhibit it.
pub fn build_term_query(train: &RetrievalIndex, term: Term) -> Result<Vec<f64>> {
    term_center(train, &train.members(term), term)
}

/// Ranks the gallery against a term query and scores it; `None` when no
/// gallery item exhibits the term.
pub fn term_average_precision(query: &[f64], term: Term, gallery: &RetrievalIndex) -> Result<Option<f64>> {
    if gallery.is_empty() {
        return Err(Error::Dataset("empty gallery".into()));
    }
    let q = match term {
        Term::Category(_) => query,
        Term::AttributeValue { attribute, .. } => &query[gallery.config.checked_block(attribute)?],
    };
    let order = rank_by_distance(q, (0..gallery.len()).map(|g| gallery.view(g, term)));
    let relevance: Vec<bool> = order.iter().map(|&g| gallery.exhibits(g, term)).collect();
    Ok(average_precision(&relevance))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermResults {
    pub scored: Vec<(Term, f64)>,
    /// Terms with no exhibiting train item or no relevant gallery item.
    pub skipped: Vec<Term>,
}

impl TermResults {
    pub fn mean(&self) -> Option<f64> {
        mean(self.scored.iter().map(|(_, ap)| *ap))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Average precision of every term, in the given order.
pub fn term_retrieval_eval(terms: &[Term], train: &RetrievalIndex, gallery: &RetrievalIndex) -> Result<TermResults> {
    if gallery.is_empty() {
        return Err(Error::Dataset("empty gallery".into()));
    }
    let mut results = TermResults::default();
    for &term in terms {
        let members = train.members(term);
        if members.is_empty() {
            results.skipped.push(term);
            continue;
        }
        let query = term_center(train, &members, term)?;
        match term_average_precision(&query, term, gallery)? {
            Some(ap) => results.scored.push((term, ap)),
            None => results.skipped.push(term),
        }
    }
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderedScores {
    pub mae: f64,
    pub mrr: f64,
    pub items: usize,
}

/// Scores an ordered attribute by ranking its value proxies by distance to
/// each item's unnormalised block embedding.
pub fn ordered_attribute_eval(index: &RetrievalIndex, checkpoint: &Checkpoint, attribute: usize) -> Result<OrderedScores> {
    let spec = checkpoint.label_space.attributes.get(attribute).ok_or(Error::OutOfRange {
        what: "attribute",
        index: attribute,
        limit: checkpoint.label_space.attributes.len(),
    })?;
    let ranks = match (&spec.ranks, spec.ordered) {
        (Some(r), true) => r,
        _ => return Err(Error::Config(format!("attribute {:?} is not ordered", spec.name))),
    };
    let proxies = &checkpoint.proxies.attribute_proxies[attribute];
    let block = index.config.checked_block(attribute)?;
    let (mut abs_err, mut recip, mut count) = (0.0, 0.0, 0usize);
    for i in 0..index.len() {
        let Some(truth) = index.attributes[i].get(attribute).copied().flatten() else {
            continue;
        };
        let e = &index.raw_embedding(i)[block.clone()];
        let order = rank_by_distance(e, proxies.rows().into_iter().map(|r| r.to_slice().unwrap()));
        let position = order.iter().position(|&v| v == truth).unwrap();
        abs_err += (ranks[order[0]] - ranks[truth]).abs();
        recip += 1.0 / (position + 1) as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Dataset(format!("no item exhibits attribute {:?}", spec.name)));
    }
    Ok(OrderedScores {
        mae: abs_err / count as f64,
        mrr: recip / count as f64,
        items: count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallScore {
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueScore {
    pub attribute: String,
    pub value: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedScore {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderedReport {
    pub attribute: String,
    pub mae: f64,
    pub mrr: f64,
    pub items: usize,
    /// `‖S - P‖_F` between proxy cosines and rank proximities.
    pub order_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub train_items: usize,
    pub query_items: usize,
    pub gallery_items: usize,
    pub skipped_attribute_terms: usize,
    pub skipped_category_terms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config: EmbeddingConfig,
    pub training: crate::checkpoint::TrainingMetadata,
    pub recall_at_1: f64,
    pub recall: Vec<RecallScore>,
    /// Mean AP over all scored attribute values.
    pub attribute_map: f64,
    /// Mean AP over the scored values of each attribute.
    pub attribute_map_per_attribute: Vec<NamedScore>,
    pub attribute_value_ap: Vec<ValueScore>,
    pub category_map: f64,
    pub category_ap: Vec<NamedScore>,
    pub ordered: Vec<OrderedReport>,
    pub counts: Counts,
}

/// Full evaluation on the unseen-instance test split: recall of query
/// images against the gallery, term retrieval and ordered attributes.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, recall_ks: &[usize]) -> Result<MetricsReport> {
    let train = build_index(checkpoint, dataset, Split::Train)?;
    let queries = build_index(checkpoint, dataset, Split::Query)?;
    let gallery = build_index(checkpoint, dataset, Split::Gallery)?;
    let space = dataset.label_space();

    let mut ks: Vec<usize> = recall_ks.to_vec();
    if !ks.contains(&1) {
        ks.push(1);
    }
    ks.sort_unstable();
    ks.dedup();
    let recall = ks
        .iter()
        .map(|&k| Ok(RecallScore { k, recall: recall_at_k(&queries, &gallery, k)? }))
        .collect::<Result<Vec<_>>>()?;

    let attribute_terms: Vec<Term> = space
        .attributes
        .iter()
        .enumerate()
        .flat_map(|(attribute, a)| (0..a.values.len()).map(move |value| Term::AttributeValue { attribute, value }))
        .collect();
    let attr = term_retrieval_eval(&attribute_terms, &train, &gallery)?;
    let attribute_map = attr
        .mean()
        .ok_or_else(|| Error::Dataset("no attribute value could be scored".into()))?;
    let attribute_value_ap = attr
        .scored
        .iter()
        .map(|&(term, ap)| match term {
            Term::AttributeValue { attribute, value } => ValueScore {
                attribute: space.attributes[attribute].name.clone(),
                value: space.attributes[attribute].values[value].clone(),
                ap,
            },
            Term::Category(_) => unreachable!(),
        })
        .collect();
    let attribute_map_per_attribute = space
        .attributes
        .iter()
        .enumerate()
        .filter_map(|(k, a)| {
            mean(attr.scored.iter().filter_map(|&(t, ap)| match t {
                Term::AttributeValue { attribute, .. } if attribute == k => Some(ap),
                _ => None,
            }))
            .map(|score| NamedScore { name: a.name.clone(), score })
        })
        .collect();

    let category_terms: Vec<Term> = (0..space.categories.len()).map(Term::Category).collect();
    let cat = term_retrieval_eval(&category_terms, &train, &gallery)?;
    let category_map = cat
        .mean()
        .ok_or_else(|| Error::Dataset("no category could be scored".into()))?;
    let category_ap = cat
        .scored
        .iter()
        .map(|&(term, ap)| match term {
            Term::Category(y) => NamedScore { name: space.categories[y].clone(), score: ap },
            Term::AttributeValue { .. } => unreachable!(),
        })
        .collect();

    let mut ordered = Vec::new();
    for (k, a) in space.attributes.iter().enumerate() {
        let Some(ranks) = a.ranks.as_ref().filter(|_| a.ordered) else {
            continue;
        };
        let scores = ordered_attribute_eval(&queries, checkpoint, k)?;
        let proximity = proximity_matrix(ranks, checkpoint.metadata.sigma)?;
        let (order_residual, _) = order_regularizer(&checkpoint.proxies.attribute_proxies[k], &proximity)?;
        ordered.push(OrderedReport {
            attribute: a.name.clone(),
            mae: scores.mae,
            mrr: scores.mrr,
            items: scores.items,
            order_residual,
        });
    }

    Ok(MetricsReport {
        seed: checkpoint.metadata.seed,
        config: checkpoint.config,
        training: checkpoint.metadata.clone(),
        recall_at_1: recall.iter().find(|r| r.k == 1).unwrap().recall,
        recall,
        attribute_map,
        attribute_map_per_attribute,
        attribute_value_ap,
        category_map,
        category_ap,
        ordered,
        counts: Counts {
            train_items: train.len(),
            query_items: queries.len(),
            gallery_items: gallery.len(),
            skipped_attribute_terms: attr.skipped.len(),
            skipped_category_terms: cat.skipped.len(),
        },
    })
}
