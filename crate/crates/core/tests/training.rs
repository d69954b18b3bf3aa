use coopembed::checkpoint::Checkpoint;
use coopembed::train::initialize;
use coopembed::*;

fn small_synth(seed: u64) -> Dataset {
    let config = SynthConfig {
        train_instances: 24,
        test_instances: 8,
        categories: 3,
        seed,
        ..Default::default()
    };
    generate(&config).unwrap().0
}

fn embed() -> EmbeddingConfig {
    EmbeddingConfig::new(4, 6).unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        base_lr: 1e-3,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_is_identity() {
    let ds = small_synth(1);
    let mut weights = LossWeights::default();
    weights.attribute = 0.0;
    weights.category = 0.0;
    weights.embedding_reg = 0.0;
    weights.order = 0.0;
    let config = TrainConfig {
        epochs: 1,
        base_lr: 0.0,
        weights,
        learn_instance_proxies: false,
        learn_attribute_proxies: false,
        ..quick(5)
    };
    let (projector, proxies) = initialize(&ds, &embed(), &config).unwrap();
    let out = train(&ds, &embed(), &config).unwrap();
    assert_eq!(out.checkpoint.projector, projector);
    assert_eq!(out.checkpoint.proxies, proxies);

    let all_on = TrainConfig { base_lr: 0.0, ..quick(5) };
    let (projector, proxies) = initialize(&ds, &embed(), &all_on).unwrap();
    let out = train(&ds, &embed(), &all_on).unwrap();
    assert_eq!(out.checkpoint.projector, projector);
    assert_eq!(out.checkpoint.proxies, proxies);
}

#[test]
fn frozen_proxies_stay_bit_identical() {
    let ds = small_synth(2);
    let config = TrainConfig {
        learn_instance_proxies: false,
        learn_attribute_proxies: false,
        ..quick(3)
    };
    let (projector, proxies) = initialize(&ds, &embed(), &config).unwrap();
    let out = train(&ds, &embed(), &config).unwrap();
    assert_eq!(out.checkpoint.proxies, proxies);
    assert_ne!(out.checkpoint.projector, projector);

    let attrs_only = TrainConfig { learn_instance_proxies: false, ..quick(3) };
    let out = train(&ds, &embed(), &attrs_only).unwrap();
    assert_eq!(out.checkpoint.proxies.instance_proxies, proxies.instance_proxies);
    assert_ne!(out.checkpoint.proxies.attribute_proxies, proxies.attribute_proxies);
}

#[test]
fn same_seed_same_bytes() {
    let ds = small_synth(3);
    let a = train(&ds, &embed(), &quick(9)).unwrap();
    let b = train(&ds, &embed(), &quick(9)).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.log, b.log);
    let c = train(&ds, &embed(), &quick(10)).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}

#[test]
fn thread_count_does_not_change_results() {
    let ds = small_synth(4);
    let serial = train(&ds, &embed(), &quick(1)).unwrap();
    let parallel = train(&ds, &embed(), &TrainConfig { threads: 3, ..quick(1) }).unwrap();
    assert_eq!(serial.checkpoint.to_bytes(), parallel.checkpoint.to_bytes());
    assert_eq!(serial.log, parallel.log);
}

#[test]
fn log_covers_every_batch() {
    let ds = small_synth(5);
    let out = train(&ds, &embed(), &quick(2)).unwrap();
    // 24 instances x 4 images = 96 items = 6 batches of 16, for 3 epochs.
    assert_eq!(out.log.steps.len(), 18);
    assert!(out.log.steps.windows(2).all(|w| w[0].step + 1 == w[1].step && w[0].epoch <= w[1].epoch));
    assert_eq!(out.log.epoch_means().len(), 3);
}

#[test]
fn loss_falls_early_on_default_synthetic_data() {
    for seed in 0..5 {
        let (ds, _) = generate(&SynthConfig { seed, ..Default::default() }).unwrap();
        let config = TrainConfig { epochs: 5, seed, ..Default::default() };
        let out = train(&ds, &EmbeddingConfig::new(4, 50).unwrap(), &config).unwrap();
        let means = out.log.epoch_means();
        assert!(means[4].1 < means[0].1, "seed {seed}: {means:?}");
    }
}

#[test]
fn checkpoint_keeps_train_instances_only() {
    let ds = small_synth(6);
    let out = train(&ds, &embed(), &quick(0)).unwrap();
    let ckpt: &Checkpoint = &out.checkpoint;
    assert_eq!(ckpt.label_space.instances.len(), 24);
    assert_eq!(ckpt.proxies.num_instances(), 24);
    assert!(ckpt.label_space.instances.iter().all(|i| i.starts_with("train")));
    ckpt.check_compatible(&ds).unwrap();
}

#[test]
fn invalid_inputs_are_rejected() {
    let ds = small_synth(7);
    assert!(matches!(
        train(&ds, &EmbeddingConfig::new(3, 6).unwrap(), &quick(0)),
        Err(Error::Config(_))
    ));
    assert!(train(&ds, &embed(), &TrainConfig { batch_size: 0, ..quick(0) }).is_err());

    // A declared category without train instances.
    let space = ds.label_space().clone();
    let mut categories = space.categories.clone();
    categories.push("unused".into());
    let relabelled = LabelSpace::new(space.attributes.clone(), categories, space.instances.clone()).unwrap();
    let ds2 = Dataset::new(relabelled, ds.items().to_vec(), ds.features().clone()).unwrap();
    assert!(matches!(train(&ds2, &embed(), &quick(0)), Err(Error::EmptyCategory(_))));
    let mut no_cat = quick(0);
    no_cat.weights.category = 0.0;
    assert!(train(&ds2, &embed(), &no_cat).is_ok());
}

#[test]
fn renormalised_missing_attributes_train() {
    let ds = small_synth(8);
    let corrupted = corrupt_attributes(&ds, 0.5, CorruptionMode::Absence, 1).unwrap();
    let plain = train(&corrupted, &embed(), &quick(0)).unwrap();
    let renorm = train(
        &corrupted,
        &embed(),
        &TrainConfig { renormalize_missing_attributes: true, ..quick(0) },
    )
    .unwrap();
    assert!(renorm.checkpoint.metadata.renormalize_missing);
    assert_ne!(plain.checkpoint.projector, renorm.checkpoint.projector);
}
