//! Mini-batch Adam training of the projector and the latent proxies.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingMetadata};
use crate::data::{Dataset, LabelSpace, Split};
use crate::embedding::{EmbeddingConfig, Projector};
use crate::error::{Error, Result};
use crate::loss::{Example, LossWeights, Objective, OrderingConfig, ProxyStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub adam: AdamConfig,
    /// Decoupled weight decay, projector parameters only.
    pub weight_decay: f64,
    pub proxy_lr_multiplier: f64,
    pub weights: LossWeights,
    /// Width of the Gaussian kernel for ordered attributes.
    pub sigma: f64,
    pub seed: u64,
    pub learn_instance_proxies: bool,
    pub learn_attribute_proxies: bool,
    pub renormalize_missing_attributes: bool,
    /// Worker threads for intra-batch parallelism; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            base_lr: 1e-4,
            adam: AdamConfig::default(),
            weight_decay: 5e-5,
            proxy_lr_multiplier: 10.0,
            weights: LossWeights::default(),
            sigma: 1.0,
            seed: 0,
            learn_instance_proxies: true,
            learn_attribute_proxies: true,
            renormalize_missing_attributes: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        for (name, value) in [
            ("learning rate", self.base_lr),
            ("weight decay", self.weight_decay),
            ("proxy learning-rate multiplier", self.proxy_lr_multiplier),
            ("adam epsilon", self.adam.epsilon),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {value}"));
            }
        }
        for (name, beta) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        self.weights.validate()
    }
}

/// First and second moments of every parameter tensor plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            t: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One tensor to update in an Adam step.
pub struct ParamGroup<'a> {
    /// Index of this tensor's moments in the [`AdamState`].
    pub slot: usize,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
    pub lr: f64,
    pub weight_decay: f64,
}

/// Bias-corrected Adam with decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
///
/// Tensors not listed in `groups` keep both their values and their moments.
pub fn adam_step(groups: &mut [ParamGroup<'_>], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    for g in groups.iter() {
        if g.params.len() != g.grads.len() || state.first.get(g.slot).map(Vec::len) != Some(g.params.len()) {
            return Err(Error::Dimension {
                expected: g.params.len(),
                actual: g.grads.len(),
            });
        }
        if g.grads.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let correction1 = 1.0 - config.beta1.powi(t);
    let correction2 = 1.0 - config.beta2.powi(t);
    for g in groups.iter_mut() {
        let m = &mut state.first[g.slot];
        let v = &mut state.second[g.slot];
        for i in 0..g.params.len() {
            let grad = g.grads[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad * grad;
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            let p = g.params[i];
            g.params[i] = p - g.lr * (m_hat / (v_hat.sqrt() + config.epsilon) + g.weight_decay * p);
        }
    }
    Ok(())
}

/// Seed of the shuffle for a given epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Shuffles `0..num_items` with a seeded RNG and cuts it into consecutive
/// batches; the last batch may be smaller.
pub fn make_batches(num_items: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..num_items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub steps: Vec<StepRecord>,
}

impl LossLog {
    /// `(epoch, mean batch loss)` for every epoch, in order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.steps {
            match out.last_mut() {
                Some((epoch, sum, count)) if *epoch == r.epoch => {
                    *sum += r.loss;
                    *count += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter()
            .map(|(e, sum, count)| (e, sum / count as f64))
            .collect()
    }

    /// `epoch,step,loss` CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss\n");
        for r in &self.steps {
            writeln!(out, "{},{},{}", r.epoch, r.step, r.loss).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: LossLog,
}

/// Training view of a dataset: proxy rows for train instances only.
struct TrainingSet<'a> {
    label_space: LabelSpace,
    instance_category: Vec<usize>,
    examples: Vec<Example<'a>>,
}

fn training_set(dataset: &Dataset) -> Result<TrainingSet<'_>> {
    let train_instances = dataset.train_instances();
    if train_instances.is_empty() {
        return Err(Error::Dataset("the train split is empty".into()));
    }
    let space = dataset.label_space();
    let mut row_of = vec![usize::MAX; space.instances.len()];
    for (row, &instance) in train_instances.iter().enumerate() {
        row_of[instance] = row;
    }
    let mut instance_category = vec![0; train_instances.len()];
    let examples = dataset
        .split_items(Split::Train)
        .map(|(_, item)| {
            instance_category[row_of[item.instance]] = item.category;
            Example {
                feature: dataset.feature(item),
                instance: row_of[item.instance],
                category: item.category,
                attributes: &item.attributes,
            }
        })
        .collect();
    let label_space = LabelSpace::new(
        space.attributes.clone(),
        space.categories.clone(),
        train_instances
            .iter()
            .map(|&i| space.instances[i].clone())
            .collect(),
    )?;
    Ok(TrainingSet {
        label_space,
        instance_category,
        examples,
    })
}

/// Random initial projector and proxies, exactly as [`train`] draws them.
pub fn initialize(
    dataset: &Dataset,
    embed_config: &EmbeddingConfig,
    config: &TrainConfig,
) -> Result<(Projector, ProxyStore)> {
    let set = training_set(dataset)?;
    init_parameters(dataset, &set, embed_config, config.seed)
}

fn init_parameters(
    dataset: &Dataset,
    set: &TrainingSet<'_>,
    embed_config: &EmbeddingConfig,
    seed: u64,
) -> Result<(Projector, ProxyStore)> {
    if embed_config.num_attributes() != set.label_space.num_attributes() {
        return Err(Error::Config(format!(
            "embedding has {} subspaces but the dataset declares {} attributes",
            embed_config.num_attributes(),
            set.label_space.num_attributes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projector = Projector::random(embed_config.superspace_dim(), dataset.feature_dim(), &mut rng);
    let value_counts: Vec<usize> = set
        .label_space
        .attributes
        .iter()
        .map(|a| a.values.len())
        .collect();
    let proxies = ProxyStore::random(
        embed_config,
        &value_counts,
        set.instance_category.clone(),
        set.label_space.categories.len(),
        &mut rng,
    )?;
    Ok((projector, proxies))
}

const SLOT_WEIGHTS: usize = 0;
const SLOT_BIAS: usize = 1;
const SLOT_INSTANCES: usize = 2;
const SLOT_ATTRIBUTES: usize = 3;

/// Trains projector and proxies on the train split of `dataset`.
pub fn train(dataset: &Dataset, embed_config: &EmbeddingConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let set = training_set(dataset)?;
    let (mut projector, mut proxies) = init_parameters(dataset, &set, embed_config, config.seed)?;
    if config.weights.category != 0.0 {
        if let Some(empty) = proxies.category_sizes().iter().position(|&s| s == 0) {
            return Err(Error::EmptyCategory(format!(
                "category {:?} has no train instance",
                set.label_space.categories[empty]
            )));
        }
    }
    let ordering = OrderingConfig::from_label_space(&set.label_space, config.sigma)?;
    let objective = Objective {
        weights: config.weights,
        ordering: &ordering,
        config: *embed_config,
        renormalize_missing: config.renormalize_missing_attributes,
    };

    let mut sizes = vec![
        projector.weights.len(),
        projector.bias.len(),
        proxies.instance_proxies.len(),
    ];
    sizes.extend(proxies.attribute_proxies.iter().map(|a| a.len()));
    let mut adam = AdamState::new(&sizes);

    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let proxy_lr = config.base_lr * config.proxy_lr_multiplier;
    let mut log = LossLog::default();
    let mut step = 0;
    let mut batch: Vec<Example<'_>> = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        for indices in make_batches(set.examples.len(), config.batch_size, epoch_seed(config.seed, epoch)) {
            batch.clear();
            batch.extend(indices.iter().map(|&i| set.examples[i]));
            let (loss, grads) = objective
                .loss_and_grad(&batch, &projector, &proxies, pool.as_ref())
                .map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::NonFinite(format!("{what} at epoch {epoch}, step {step}"))
                    }
                    other => other,
                })?;
            log.steps.push(StepRecord { epoch, step, loss });

            let mut groups = vec![
                ParamGroup {
                    slot: SLOT_WEIGHTS,
                    params: projector.weights.as_slice_mut().unwrap(),
                    grads: grads.weights.as_slice().unwrap(),
                    lr: config.base_lr,
                    weight_decay: config.weight_decay,
                },
                ParamGroup {
                    slot: SLOT_BIAS,
                    params: projector.bias.as_slice_mut().unwrap(),
                    grads: grads.bias.as_slice().unwrap(),
                    lr: config.base_lr,
                    weight_decay: config.weight_decay,
                },
            ];
            if config.learn_instance_proxies {
                groups.push(ParamGroup {
                    slot: SLOT_INSTANCES,
                    params: proxies.instance_proxies.as_slice_mut().unwrap(),
                    grads: grads.instance_proxies.as_slice().unwrap(),
                    lr: proxy_lr,
                    weight_decay: 0.0,
                });
            }
            if config.learn_attribute_proxies {
                for (k, (p, g)) in proxies
                    .attribute_proxies
                    .iter_mut()
                    .zip(&grads.attribute_proxies)
                    .enumerate()
                {
                    groups.push(ParamGroup {
                        slot: SLOT_ATTRIBUTES + k,
                        params: p.as_slice_mut().unwrap(),
                        grads: g.as_slice().unwrap(),
                        lr: proxy_lr,
                        weight_decay: 0.0,
                    });
                }
            }
            adam_step(&mut groups, &mut adam, &config.adam)?;
            step += 1;
        }
    }

    let metadata = TrainingMetadata {
        seed: config.seed,
        epochs: config.epochs,
        weights: config.weights,
        sigma: config.sigma,
        renormalize_missing: config.renormalize_missing_attributes,
    };
    let checkpoint = Checkpoint::new(*embed_config, set.label_space, projector, proxies, metadata)?;
    Ok(TrainOutcome { checkpoint, log })
}
