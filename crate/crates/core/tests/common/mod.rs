//! Helpers shared by the integration tests: random problems, a central
//! finite-difference gradient oracle and brute-force metric oracles.
#![allow(dead_code)]

use coopembed::eval::{RetrievalIndex, Term};
use coopembed::loss::{Example, Gradients, Objective};
use coopembed::nav::NeighbourGraph;
use coopembed::{EmbeddingConfig, LossWeights, OrderingConfig, Projector, ProxyStore, Split};
use ndarray::{Array1, Array2};
use rand::Rng;

/// A small random training problem with explicit parameters.
pub struct Problem {
    pub config: EmbeddingConfig,
    pub projector: Projector,
    pub store: ProxyStore,
    pub ordering: OrderingConfig,
    pub features: Vec<Vec<f64>>,
    pub instances: Vec<usize>,
    pub categories: Vec<usize>,
    pub attributes: Vec<Vec<Option<usize>>>,
}

impl Problem {
    pub fn examples(&self) -> Vec<Example<'_>> {
        (0..self.features.len())
            .map(|i| Example {
                feature: &self.features[i],
                instance: self.instances[i],
                category: self.categories[i],
                attributes: &self.attributes[i],
            })
            .collect()
    }
}

/// Draws a problem with at most 10 instances, 4 categories, 3 attributes,
/// superspace width 18 and batch 5. Some attributes are ordered and some
/// items miss attributes.
pub fn random_problem<R: Rng>(rng: &mut R) -> Problem {
    let k = rng.random_range(1..=3);
    let n = rng.random_range(1..=18 / k);
    let config = EmbeddingConfig::new(k, n).unwrap();
    let big_n = config.superspace_dim();
    let d = rng.random_range(2..=6);
    let num_categories = rng.random_range(1..=4);
    let num_instances = rng.random_range(num_categories..=10);
    let value_counts: Vec<usize> = (0..k).map(|_| rng.random_range(2..=4)).collect();
    let instance_category: Vec<usize> = (0..num_instances)
        .map(|i| if i < num_categories { i } else { rng.random_range(0..num_categories) })
        .collect();

    let mut uniform = |rows: usize, cols: usize, scale: f64| {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
    };
    let projector = Projector::new(uniform(big_n, d, 0.7), Array1::zeros(big_n)).unwrap();
    let instance_proxies = uniform(num_instances, big_n, 1.0);
    let attribute_proxies: Vec<Array2<f64>> = value_counts.iter().map(|&v| uniform(v, n, 1.0)).collect();
    let mut projector = projector;
    projector.bias = Array1::from_shape_fn(big_n, |_| rng.random_range(-0.3..0.3));
    let store = ProxyStore::new(
        instance_proxies,
        attribute_proxies,
        instance_category.clone(),
        num_categories,
    )
    .unwrap();

    let proximity = value_counts
        .iter()
        .map(|&v| {
            rng.random_bool(0.5).then(|| {
                let ranks: Vec<f64> = (0..v).map(|r| r as f64 + 1.0).collect();
                coopembed::loss::proximity_matrix(&ranks, 1.0).unwrap()
            })
        })
        .collect();
    let ordering = OrderingConfig { sigma: 1.0, proximity };

    let batch = rng.random_range(1..=5);
    let mut features = Vec::new();
    let mut instances = Vec::new();
    let mut categories = Vec::new();
    let mut attributes = Vec::new();
    for _ in 0..batch {
        let inst = rng.random_range(0..num_instances);
        features.push((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        instances.push(inst);
        categories.push(instance_category[inst]);
        attributes.push(
            value_counts
                .iter()
                .map(|&v| rng.random_bool(0.75).then(|| rng.random_range(0..v)))
                .collect(),
        );
    }
    Problem {
        config,
        projector,
        store,
        ordering,
        features,
        instances,
        categories,
        attributes,
    }
}

pub fn random_weights<R: Rng>(rng: &mut R) -> LossWeights {
    LossWeights {
        instance: rng.random_range(0.1..2.0),
        attribute: rng.random_range(0.1..2.0),
        category: rng.random_range(0.1..2.0),
        embedding_reg: rng.random_range(0.0..1.0),
        order: rng.random_range(0.1..2.0),
    }
}

fn loss_only(objective: &Objective<'_>, problem: &Problem, projector: &Projector, store: &ProxyStore) -> f64 {
    objective
        .loss_and_grad(&problem.examples(), projector, store, None)
        .unwrap()
        .0
}

/// Largest relative deviation between analytic and central-difference
/// gradients over every parameter, with relative error
/// `|a - f| / max(|a|, |f|, floor)`.
pub fn max_gradient_error(objective: &Objective<'_>, problem: &Problem, eps: f64, floor: f64) -> (f64, usize) {
    let (_, analytic): (f64, Gradients) = objective
        .loss_and_grad(&problem.examples(), &problem.projector, &problem.store, None)
        .unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut record = |a: f64, f: f64| {
        let err = (a - f).abs() / a.abs().max(f.abs()).max(floor);
        worst = worst.max(err);
        checked += 1;
    };

    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * eps);

    for idx in 0..problem.projector.weights.len() {
        let mut p = problem.projector.clone();
        let (r, c) = (idx / p.weights.ncols(), idx % p.weights.ncols());
        let orig = p.weights[[r, c]];
        p.weights[[r, c]] = orig + eps;
        let plus = loss_only(objective, problem, &p, &problem.store);
        p.weights[[r, c]] = orig - eps;
        let minus = loss_only(objective, problem, &p, &problem.store);
        record(analytic.weights[[r, c]], central(plus, minus));
    }
    for j in 0..problem.projector.bias.len() {
        let mut p = problem.projector.clone();
        let orig = p.bias[j];
        p.bias[j] = orig + eps;
        let plus = loss_only(objective, problem, &p, &problem.store);
        p.bias[j] = orig - eps;
        let minus = loss_only(objective, problem, &p, &problem.store);
        record(analytic.bias[j], central(plus, minus));
    }
    let shape = problem.store.instance_proxies.dim();
    for r in 0..shape.0 {
        for c in 0..shape.1 {
            let mut s = problem.store.clone();
            let orig = s.instance_proxies[[r, c]];
            s.instance_proxies[[r, c]] = orig + eps;
            let plus = loss_only(objective, problem, &problem.projector, &s);
            s.instance_proxies[[r, c]] = orig - eps;
            let minus = loss_only(objective, problem, &problem.projector, &s);
            record(analytic.instance_proxies[[r, c]], central(plus, minus));
        }
    }
    for k in 0..problem.store.attribute_proxies.len() {
        let shape = problem.store.attribute_proxies[k].dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut s = problem.store.clone();
                let orig = s.attribute_proxies[k][[r, c]];
                s.attribute_proxies[k][[r, c]] = orig + eps;
                let plus = loss_only(objective, problem, &problem.projector, &s);
                s.attribute_proxies[k][[r, c]] = orig - eps;
                let minus = loss_only(objective, problem, &problem.projector, &s);
                record(analytic.attribute_proxies[k][[r, c]], central(plus, minus));
            }
        }
    }
    (worst, checked)
}

/// A retrieval index over given rows; embeddings are used as they are.
pub fn index_from_rows(
    config: EmbeddingConfig,
    rows: Vec<Vec<f64>>,
    instances: Vec<usize>,
    categories: Vec<usize>,
    attributes: Vec<Vec<Option<usize>>>,
) -> RetrievalIndex {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let embeddings = Array2::from_shape_vec((n, config.superspace_dim()), flat).unwrap();
    RetrievalIndex {
        config,
        split: Split::Gallery,
        item_ids: (0..n).map(|i| format!("item{i}")).collect(),
        raw_embeddings: embeddings.clone(),
        embeddings,
        instances,
        categories,
        attributes,
    }
}

/// Small-integer coordinates make exact distance ties common.
pub fn tie_prone_rows<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.random_range(-2..=2) as f64).collect())
        .collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// 1-based rank of candidate `g` when candidates are ordered by distance
/// then index, found by counting rather than sorting.
pub fn rank_by_counting(dists: &[f64], g: usize) -> usize {
    1 + (0..dists.len())
        .filter(|&h| dists[h] < dists[g] || (dists[h] == dists[g] && h < g))
        .count()
}

pub fn oracle_recall(queries: &RetrievalIndex, gallery: &RetrievalIndex, k: usize) -> f64 {
    let mut hits = 0;
    for q in 0..queries.len() {
        let dists: Vec<f64> = (0..gallery.len())
            .map(|g| sq_dist(queries.embedding(q), gallery.embedding(g)))
            .collect();
        let hit = (0..gallery.len())
            .any(|g| rank_by_counting(&dists, g) <= k && gallery.instances[g] == queries.instances[q]);
        if hit {
            hits += 1;
        }
    }
    hits as f64 / queries.len() as f64
}

/// Precision at each relevant rank, summed in rank order.
pub fn oracle_ap(dists: &[f64], relevant: &[bool]) -> Option<f64> {
    let mut ranks: Vec<usize> = (0..dists.len())
        .filter(|&g| relevant[g])
        .map(|g| rank_by_counting(dists, g))
        .collect();
    if ranks.is_empty() {
        return None;
    }
    ranks.sort_unstable();
    let mut sum = 0.0;
    for (i, &r) in ranks.iter().enumerate() {
        sum += (i + 1) as f64 / r as f64;
    }
    Some(sum / ranks.len() as f64)
}

pub fn oracle_term_ap(query: &[f64], term: Term, gallery: &RetrievalIndex) -> Option<f64> {
    let range = match term {
        Term::Category(_) => 0..gallery.config.superspace_dim(),
        Term::AttributeValue { attribute, .. } => gallery.config.block(attribute),
    };
    let dists: Vec<f64> = (0..gallery.len())
        .map(|g| sq_dist(&query[range.clone()], &gallery.embedding(g)[range.clone()]))
        .collect();
    let relevant: Vec<bool> = (0..gallery.len())
        .map(|g| match term {
            Term::Category(y) => gallery.categories[g] == y,
            Term::AttributeValue { attribute, value } => gallery.attributes[g][attribute] == Some(value),
        })
        .collect();
    oracle_ap(&dists, &relevant)
}

/// `(MAE, MRR)` of nearest-proxy prediction on unnormalised block `k`.
pub fn oracle_ordered(index: &RetrievalIndex, proxies: &Array2<f64>, ranks: &[f64], k: usize) -> Option<(f64, f64)> {
    let block = index.config.block(k);
    let (mut mae, mut mrr, mut count) = (0.0, 0.0, 0usize);
    for i in 0..index.len() {
        let Some(truth) = index.attributes[i][k] else { continue };
        let e = &index.raw_embedding(i)[block.clone()];
        let dists: Vec<f64> = proxies.rows().into_iter().map(|p| sq_dist(e, p.as_slice().unwrap())).collect();
        let predicted = (0..dists.len()).find(|&v| rank_by_counting(&dists, v) == 1).unwrap();
        mae += (ranks[predicted] - ranks[truth]).abs();
        mrr += 1.0 / rank_by_counting(&dists, truth) as f64;
        count += 1;
    }
    (count > 0).then(|| (mae / count as f64, mrr / count as f64))
}

/// All-pairs shortest distances.
pub fn floyd_warshall(graph: &NeighbourGraph) -> Vec<Vec<f64>> {
    let n = graph.num_nodes();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (u, row) in d.iter_mut().enumerate() {
        row[u] = 0.0;
    }
    for (u, v, w) in graph.edges() {
        d[u][v] = d[u][v].min(w);
        d[v][u] = d[v][u].min(w);
    }
    for m in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][m] + d[m][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

/// Random undirected graph; integer weights keep path sums exact.
pub fn random_graph<R: Rng>(rng: &mut R, integer_weights: bool) -> NeighbourGraph {
    let n = rng.random_range(2..=20);
    let density = rng.random_range(0.1..0.6);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(density) {
                let w = if integer_weights {
                    rng.random_range(0..=9) as f64
                } else {
                    rng.random_range(0.0..5.0)
                };
                edges.push((u, v, w));
            }
        }
    }
    NeighbourGraph::from_edges(n, &edges).unwrap()
}
