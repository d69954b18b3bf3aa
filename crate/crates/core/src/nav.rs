//! kNN-graph navigation of the gallery: shortest-path transitions between
//! items and typicality within a category.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{term_center, RetrievalIndex, Term};
use crate::squared_distance;

/// Undirected weighted graph; adjacency lists are sorted by neighbour id.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourGraph {
    pub k: usize,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl NeighbourGraph {
    /// Builds a graph from undirected edges. Duplicate edges keep the first
    /// weight.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(u, v, w) in edges {
            for node in [u, v] {
                if node >= num_nodes {
                    return Err(Error::OutOfRange { what: "node", index: node, limit: num_nodes });
                }
            }
            if u == v {
                return Err(Error::Config(format!("self-loop at node {u}")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("edge weight must be finite and >= 0, got {w}")));
            }
            if adjacency[u].iter().all(|&(x, _)| x != v) {
                adjacency[u].push((v, w));
                adjacency[v].push((u, w));
            }
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(v, _)| v);
        }
        Ok(NeighbourGraph { k: 0, adjacency })
    }

    /// Connects each point to its `k` nearest others (ties by id) and
    /// symmetrises by union. Weights are Euclidean distances.
    pub fn from_points(points: &[&[f64]], k: usize) -> Result<Self> {
        let n = points.len();
        if k == 0 || k >= n {
            return Err(Error::Config(format!(
                "k must lie in 1..{n} for a graph of {n} nodes, got {k}"
            )));
        }
        let mut edges = Vec::with_capacity(n * k);
        let mut scored = Vec::with_capacity(n);
        for u in 0..n {
            scored.clear();
            scored.extend(
                (0..n)
                    .filter(|&v| v != u)
                    .map(|v| (squared_distance(points[u], points[v]), v)),
            );
            scored.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, v) in &scored[..k] {
                let (a, b) = (u.min(v), u.max(v));
                edges.push((a, b, squared_distance(points[a], points[b]).sqrt()));
            }
        }
        edges.sort_by_key(|e| (e.0, e.1));
        edges.dedup_by(|x, y| (x.0, x.1) == (y.0, y.1));
        let mut graph = Self::from_edges(n, &edges)?;
        graph.k = k;
        Ok(graph)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbours(&self, u: usize) -> &[(usize, f64)] {
        &self.adjacency[u]
    }

    pub fn weight(&self, u: usize, v: usize) -> Option<f64> {
        let list = self.adjacency.get(u)?;
        list.binary_search_by_key(&v, |&(x, _)| x).ok().map(|i| list[i].1)
    }

    /// Every edge once, as `(u, v, w)` with `u < v`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, list)| list.iter().filter(move |&&(v, _)| u < v).map(move |&(v, w)| (u, v, w)))
            .collect()
    }
}

/// Builds the kNN graph over an index, on the full superspace or on the
/// coordinates of one attribute subspace.
pub fn build_knn_graph(index: &RetrievalIndex, k: usize, subspace: Option<usize>) -> Result<NeighbourGraph> {
    let block = match subspace {
        Some(a) => index.config.checked_block(a)?,
        None => 0..index.config.superspace_dim(),
    };
    let points: Vec<&[f64]> = (0..index.len())
        .map(|i| &index.embedding(i)[block.clone()])
        .collect();
    NeighbourGraph::from_points(&points, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPath {
    pub nodes: Vec<usize>,
    pub hop_weights: Vec<f64>,
    pub total_cost: f64,
    /// Hop with the largest weight, earliest on ties; `None` for a
    /// single-node path.
    pub max_edge_index: Option<usize>,
}

impl TransitionPath {
    fn from_nodes(graph: &NeighbourGraph, nodes: Vec<usize>) -> Self {
        let hop_weights: Vec<f64> = nodes
            .windows(2)
            .map(|w| graph.weight(w[0], w[1]).expect("path follows graph edges"))
            .collect();
        let total_cost = hop_weights.iter().sum();
        let max_edge_index = max_edge_index(&hop_weights);
        TransitionPath { nodes, hop_weights, total_cost, max_edge_index }
    }

    /// JSON form with item ids in place of node indices.
    pub fn report(&self, item_ids: &[String]) -> TransitionReport {
        TransitionReport {
            path: self.nodes.iter().map(|&n| item_ids[n].clone()).collect(),
            hop_weights: self.hop_weights.clone(),
            total_cost: self.total_cost,
            max_edge_index: self.max_edge_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub path: Vec<String>,
    pub hop_weights: Vec<f64>,
    pub total_cost: f64,
    pub max_edge_index: Option<usize>,
}

/// Index of the largest weight, earliest on ties.
pub fn max_edge_index(weights: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &w) in weights.iter().enumerate() {
        if best.is_none_or(|b| w > weights[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Copy, PartialEq)]
struct Label {
    cost: f64,
    hops: usize,
}

impl Label {
    fn cmp(&self, other: &Label) -> Ordering {
        self.cost.total_cmp(&other.cost).then(self.hops.cmp(&other.hops))
    }
}

#[derive(PartialEq)]
struct Entry(Label, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Minimum-cost path; among equal costs the fewest hops, then the
/// lexicographically smallest node sequence.
pub fn shortest_path(graph: &NeighbourGraph, source: usize, target: usize) -> Result<TransitionPath> {
    let n = graph.num_nodes();
    for node in [source, target] {
        if node >= n {
            return Err(Error::OutOfRange { what: "node", index: node, limit: n });
        }
    }
    // Labels are distances to the target, so the forward walk can pick the
    // smallest admissible neighbour at every step.
    let mut label: Vec<Option<Label>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    label[target] = Some(Label { cost: 0.0, hops: 0 });
    heap.push(Reverse(Entry(Label { cost: 0.0, hops: 0 }, target)));
    while let Some(Reverse(Entry(l, u))) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == source {
            break;
        }
        for &(v, w) in graph.neighbours(u) {
            let candidate = Label { cost: l.cost + w, hops: l.hops + 1 };
            if label[v].is_none_or(|old| candidate.cmp(&old) == Ordering::Less) {
                label[v] = Some(candidate);
                heap.push(Reverse(Entry(candidate, v)));
            }
        }
    }
    if !done[source] {
        return Err(Error::NoPath { from: source, to: target });
    }

    let mut nodes = vec![source];
    let mut u = source;
    while u != target {
        let here = label[u].unwrap();
        u = graph
            .neighbours(u)
            .iter()
            .find(|&&(v, w)| {
                done[v]
                    && label[v].is_some_and(|lv| lv.hops + 1 == here.hops && lv.cost + w == here.cost)
            })
            .map(|&(v, _)| v)
            .expect("settled labels admit a predecessor");
        nodes.push(u);
    }
    Ok(TransitionPath::from_nodes(graph, nodes))
}

/// Where a transition ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    Item(usize),
    /// The gallery item nearest to the category's empirical center.
    CategoryCenter(usize),
    /// The gallery item nearest, within the attribute's subspace, to the
    /// empirical center of the attribute value.
    AttributeValueCenter { attribute: usize, value: usize },
}

/// Gallery entry nearest to the empirical center of `term`, ties by index.
pub fn nearest_to_center(index: &RetrievalIndex, term: Term) -> Result<usize> {
    let members = index.members(term);
    if members.is_empty() {
        return Err(Error::EmptyCategory(format!("no gallery item exhibits {term:?}")));
    }
    let center = term_center(index, &members, term)?;
    let center = match term {
        Term::Category(_) => &center[..],
        Term::AttributeValue { attribute, .. } => &center[index.config.block(attribute)],
    };
    let (_, best) = (0..index.len())
        .map(|i| (squared_distance(center, index.view(i, term)), i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .unwrap();
    Ok(best)
}

pub fn transition(
    index: &RetrievalIndex,
    graph: &NeighbourGraph,
    source: usize,
    destination: Destination,
) -> Result<TransitionPath> {
    if graph.num_nodes() != index.len() {
        return Err(Error::Dimension { expected: index.len(), actual: graph.num_nodes() });
    }
    let target = match destination {
        Destination::Item(t) => t,
        Destination::CategoryCenter(y) => nearest_to_center(index, Term::Category(y))?,
        Destination::AttributeValueCenter { attribute, value } => {
            nearest_to_center(index, Term::AttributeValue { attribute, value })?
        }
    };
    shortest_path(graph, source, target)
}

/// Sorts `members` by ascending distance between their points and `center`,
/// ties by index.
pub fn rank_by_center(points: &[&[f64]], members: &[usize], center: &[f64]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = members
        .iter()
        .map(|&i| (i, squared_distance(points[i], center).sqrt()))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Gallery members of category `y`, most typical first, with their distance
/// to the category's empirical center.
pub fn typicality_ranking(index: &RetrievalIndex, category: usize) -> Result<Vec<(usize, f64)>> {
    let term = Term::Category(category);
    let members = index.members(term);
    if members.is_empty() {
        return Err(Error::EmptyCategory(format!("category {category} has no gallery item")));
    }
    let center = term_center(index, &members, term)?;
    let points: Vec<&[f64]> = (0..index.len()).map(|i| index.embedding(i)).collect();
    Ok(rank_by_center(&points, &members, &center))
}
