use std::fs;
use std::io::Write;
use std::path::Path;

use coopembed::eval::{build_index, build_term_query, rank_by_distance, Term};
use coopembed::nav::{build_knn_graph, transition as shortest_transition, typicality_ranking, Destination};
use coopembed::report::{emit_json, emit_loss_log, json_bytes, FiniteReport};
use coopembed::synth::{write_synthetic, FEATURES_FILE, MANIFEST_FILE};
use coopembed::train::AdamConfig;
use coopembed::{
    corrupt_attributes, evaluate, generate, load_checkpoint, load_dataset, normalize_per_subspace,
    save_checkpoint, save_dataset, Checkpoint, CorruptionMode, Dataset, EmbeddingConfig, Error,
    LabelSpace, LossWeights, Result, RetrievalIndex, Split, SynthConfig, TrainConfig,
};
use serde::Serialize;

use crate::settings::{pick, Settings};
use crate::{
    CorruptArgs, EvalArgs, ModelArgs, RetrieveArgs, SynthArgs, TrainArgs, TransitionArgs, TypicalityArgs,
};

const DEFAULT_SUBSPACE_DIM: usize = 50;
const DEFAULT_KNN: usize = 5;
const DEFAULT_TOP: usize = 10;

fn write_report<T: Serialize + FiniteReport>(report: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => emit_json(report, path),
        None => {
            let bytes = json_bytes(report)?;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| Error::Dataset(format!("cannot write to stdout: {e}")))
        }
    }
}

fn load_model(args: &ModelArgs) -> Result<(Dataset, Checkpoint)> {
    let dataset = load_dataset(&args.data.manifest, &args.data.features)?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    checkpoint.check_compatible(&dataset)?;
    Ok((dataset, checkpoint))
}

fn category_index(space: &LabelSpace, name: &str) -> Result<usize> {
    space
        .category_index(name)
        .ok_or_else(|| Error::Config(format!("unknown category {name:?}")))
}

fn attribute_term(space: &LabelSpace, attribute: &str, value: &str) -> Result<Term> {
    let k = space
        .attribute_index(attribute)
        .ok_or_else(|| Error::Config(format!("unknown attribute {attribute:?}")))?;
    let v = space.attributes[k]
        .value_index(value)
        .ok_or_else(|| Error::Config(format!("unknown value {value:?} for attribute {attribute:?}")))?;
    Ok(Term::AttributeValue { attribute: k, value: v })
}

fn gallery_position(gallery: &RetrievalIndex, item_id: &str) -> Result<usize> {
    gallery
        .position(item_id)
        .ok_or_else(|| Error::Config(format!("{item_id:?} is not a gallery item")))
}

pub fn train(args: TrainArgs, s: &Settings) -> Result<()> {
    let dataset = load_dataset(&args.data.manifest, &args.data.features)?;
    let d = TrainConfig::default();
    let w = LossWeights::default();
    let config = TrainConfig {
        epochs: pick(args.epochs, s.epochs, d.epochs),
        batch_size: pick(args.batch_size, s.batch_size, d.batch_size),
        base_lr: pick(args.lr, s.lr, d.base_lr),
        adam: AdamConfig {
            beta1: pick(args.beta1, s.beta1, d.adam.beta1),
            beta2: pick(args.beta2, s.beta2, d.adam.beta2),
            epsilon: pick(args.adam_epsilon, s.adam_epsilon, d.adam.epsilon),
        },
        weight_decay: pick(args.weight_decay, s.weight_decay, d.weight_decay),
        proxy_lr_multiplier: pick(args.proxy_lr_multiplier, s.proxy_lr_multiplier, d.proxy_lr_multiplier),
        weights: LossWeights {
            instance: pick(args.lambda_ins, s.lambda_ins, w.instance),
            attribute: pick(args.lambda_attr, s.lambda_attr, w.attribute),
            category: pick(args.lambda_cat, s.lambda_cat, w.category),
            embedding_reg: pick(args.lambda_reg, s.lambda_reg, w.embedding_reg),
            order: pick(args.lambda_order, s.lambda_order, w.order),
        },
        sigma: pick(args.sigma, s.sigma, d.sigma),
        seed: pick(args.seed, s.seed, d.seed),
        learn_instance_proxies: !args.fixed_instance_proxies && s.learn_instance_proxies.unwrap_or(true),
        learn_attribute_proxies: !args.fixed_attribute_proxies && s.learn_attribute_proxies.unwrap_or(true),
        renormalize_missing_attributes: args.renormalize_missing || s.renormalize_missing.unwrap_or(false),
        threads: pick(args.threads, s.threads, d.threads),
    };
    let embed = EmbeddingConfig::new(
        dataset.label_space().num_attributes(),
        pick(args.subspace_dim, s.subspace_dim, DEFAULT_SUBSPACE_DIM),
    )?;
    let outcome = coopembed::train(&dataset, &embed, &config)?;
    save_checkpoint(&outcome.checkpoint, &args.out)?;
    if let Some(path) = &args.loss_log {
        emit_loss_log(&outcome.log, path)?;
    }
    if let Some((epoch, loss)) = outcome.log.epoch_means().last() {
        eprintln!("trained {} epochs; epoch {epoch} mean loss {loss:.6}", config.epochs);
    }
    Ok(())
}

pub fn eval(args: EvalArgs, s: &Settings) -> Result<()> {
    let (dataset, checkpoint) = load_model(&args.model)?;
    let ks = pick(args.recall_k, s.recall_k.clone(), vec![1]);
    let report = evaluate(&checkpoint, &dataset, &ks)?;
    write_report(&report, args.out.as_deref())
}

#[derive(Serialize)]
struct Ranked {
    item_id: String,
    distance: f64,
}

#[derive(Serialize)]
struct RetrievalReport {
    query: String,
    results: Vec<Ranked>,
}

impl FiniteReport for RetrievalReport {
    fn numbers(&self) -> Vec<(String, f64)> {
        self.results.iter().map(|r| (format!("distance of {}", r.item_id), r.distance)).collect()
    }
}

pub fn retrieve(args: RetrieveArgs, s: &Settings) -> Result<()> {
    let (dataset, checkpoint) = load_model(&args.model)?;
    let space = dataset.label_space();
    let gallery = build_index(&checkpoint, &dataset, Split::Gallery)?;
    let top = pick(args.top, s.top, DEFAULT_TOP);

    let (description, query, term, exclude) = if let Some(id) = &args.item {
        let item = dataset
            .items()
            .iter()
            .find(|i| &i.item_id == id)
            .ok_or_else(|| Error::Config(format!("unknown item {id:?}")))?;
        let embedding = checkpoint.projector.project(dataset.feature(item))?;
        let query = normalize_per_subspace(&embedding, &checkpoint.config);
        (format!("item {id}"), query, None, gallery.position(id))
    } else {
        let term = match (&args.category, &args.attribute, &args.value) {
            (Some(c), _, _) => Term::Category(category_index(space, c)?),
            (None, Some(a), Some(v)) => attribute_term(space, a, v)?,
            _ => return Err(Error::Config("give --item, --category or --attribute with --value".into())),
        };
        let train = build_index(&checkpoint, &dataset, Split::Train)?;
        let description = match term {
            Term::Category(y) => format!("category {}", space.categories[y]),
            Term::AttributeValue { attribute, value } => format!(
                "attribute {}={}",
                space.attributes[attribute].name, space.attributes[attribute].values[value]
            ),
        };
        (description, build_term_query(&train, term)?, Some(term), None)
    };

    let view = |i: usize| match term {
        Some(t) => gallery.view(i, t),
        None => gallery.embedding(i),
    };
    let q: &[f64] = match term {
        Some(Term::AttributeValue { attribute, .. }) => &query[checkpoint.config.block(attribute)],
        _ => &query,
    };
    let results = rank_by_distance(q, (0..gallery.len()).map(view))
        .into_iter()
        .filter(|&g| Some(g) != exclude)
        .take(top)
        .map(|g| Ranked {
            item_id: gallery.item_ids[g].clone(),
            distance: q.iter().zip(view(g)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        })
        .collect();
    write_report(&RetrievalReport { query: description, results }, args.out.as_deref())
}

pub fn transition(args: TransitionArgs, s: &Settings) -> Result<()> {
    let (dataset, checkpoint) = load_model(&args.model)?;
    let space = dataset.label_space();
    let gallery = build_index(&checkpoint, &dataset, Split::Gallery)?;
    let subspace = match &args.subspace {
        Some(name) => Some(
            space
                .attribute_index(name)
                .ok_or_else(|| Error::Config(format!("unknown attribute {name:?}")))?,
        ),
        None => None,
    };
    let graph = build_knn_graph(&gallery, pick(args.k, s.k, DEFAULT_KNN), subspace)?;
    let source = gallery_position(&gallery, &args.source)?;
    let destination = match (&args.target, &args.category, &args.attribute, &args.value) {
        (Some(t), _, _, _) => Destination::Item(gallery_position(&gallery, t)?),
        (None, Some(c), _, _) => Destination::CategoryCenter(category_index(space, c)?),
        (None, None, Some(a), Some(v)) => match attribute_term(space, a, v)? {
            Term::AttributeValue { attribute, value } => Destination::AttributeValueCenter { attribute, value },
            Term::Category(_) => unreachable!(),
        },
        _ => return Err(Error::Config("give --target, --category or --attribute with --value".into())),
    };
    let path = shortest_transition(&gallery, &graph, source, destination)?;
    write_report(&path.report(&gallery.item_ids), args.out.as_deref())
}

#[derive(Serialize)]
struct TypicalityReport {
    category: String,
    items: Vec<Ranked>,
}

impl FiniteReport for TypicalityReport {
    fn numbers(&self) -> Vec<(String, f64)> {
        self.items.iter().map(|r| (format!("distance of {}", r.item_id), r.distance)).collect()
    }
}

pub fn typicality(args: TypicalityArgs, _s: &Settings) -> Result<()> {
    let (dataset, checkpoint) = load_model(&args.model)?;
    let gallery = build_index(&checkpoint, &dataset, Split::Gallery)?;
    let y = category_index(dataset.label_space(), &args.category)?;
    let items = typicality_ranking(&gallery, y)?
        .into_iter()
        .map(|(i, distance)| Ranked { item_id: gallery.item_ids[i].clone(), distance })
        .collect();
    write_report(&TypicalityReport { category: args.category, items }, args.out.as_deref())
}

pub fn synth(args: SynthArgs, s: &Settings) -> Result<()> {
    let d = SynthConfig::default();
    let ordered_attribute = if args.no_ordered_attribute {
        None
    } else {
        args.ordered_attribute.or(s.ordered_attribute).or(d.ordered_attribute)
    };
    let config = SynthConfig {
        value_counts: pick(args.value_counts, s.value_counts.clone(), d.value_counts),
        ordered_attribute,
        categories: pick(args.categories, s.categories, d.categories),
        train_instances: pick(args.train_instances, s.train_instances, d.train_instances),
        test_instances: pick(args.test_instances, s.test_instances, d.test_instances),
        images_per_instance: pick(args.images_per_instance, s.images_per_instance, d.images_per_instance),
        feature_dim: pick(args.feature_dim, s.feature_dim, d.feature_dim),
        prototype_dim: pick(args.prototype_dim, s.prototype_dim, d.prototype_dim),
        noise_std: pick(args.noise_std, s.noise_std, d.noise_std),
        jitter_std: pick(args.jitter_std, s.jitter_std, d.jitter_std),
        concentration: args.concentration.or(s.concentration).or(d.concentration),
        seed: pick(args.seed, s.seed, d.seed),
    };
    let (dataset, truth) = generate(&config)?;
    write_synthetic(&args.out, &dataset, &truth)?;
    eprintln!("wrote {} items to {}", dataset.items().len(), args.out.display());
    Ok(())
}

pub fn corrupt(args: CorruptArgs, s: &Settings) -> Result<()> {
    let fraction = args
        .fraction
        .or(s.fraction)
        .ok_or_else(|| Error::Config("missing --fraction".into()))?;
    let mode: CorruptionMode = args
        .mode
        .as_deref()
        .or(s.mode.as_deref())
        .unwrap_or("absence")
        .parse()?;
    let dataset = load_dataset(&args.data.manifest, &args.data.features)?;
    let corrupted = corrupt_attributes(&dataset, fraction, mode, pick(args.seed, s.seed, 0))?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    save_dataset(&corrupted, &args.out.join(MANIFEST_FILE), &args.out.join(FEATURES_FILE))
}
