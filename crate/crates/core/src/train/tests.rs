use super::*;
use crate::eval::synth::{generate_dataset, SynthConfig};
use rand::Rng;

fn random_params(spec: &ClassifierSpec, agg: Aggregator, rows: usize, d: usize, seed: u64) -> ProbeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = agg.output_dim(rows, d);
    ProbeParams {
        attention: AttentionParams {
            weights: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            bias: rng.gen_range(-1.0..1.0),
        },
        predictor: PredictorParams::glorot(spec, input_dim, &mut rng),
    }
}

/// Random inputs at least 1e-3 away from every kink of the loss.
fn random_batch(
    params: &ProbeParams,
    spec: &ClassifierSpec,
    agg: Aggregator,
    n: usize,
    rows: usize,
    d: usize,
    seed: u64,
) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n)
        .map(|i| loop {
            let h = Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.gen_range(-2.0..2.0)).collect());
            if kink_distance(params, spec, agg, &h) >= 1e-3 {
                break Example {
                    id: format!("e{i}"),
                    h,
                    y: (i % 2) as u8,
                };
            }
        })
        .collect()
}

fn small_mlp() -> ClassifierSpec {
    ClassifierSpec::Mlp { hidden: vec![5, 3] }
}

#[test]
fn gradients_match_finite_differences() {
    let classifiers = [
        ClassifierSpec::LogisticRegression,
        small_mlp(),
        ClassifierSpec::LinearSvm,
    ];
    for spec in &classifiers {
        for agg in Aggregator::ALL {
            for seed in 0..3 {
                let params = random_params(spec, agg, 4, 5, seed);
                let batch = random_batch(&params, spec, agg, 3, 4, 5, seed);
                let err = grad_check(&params, spec, agg, &batch);
                assert!(err < 1e-4, "{spec}/{agg} seed {seed}: {err}");
            }
        }
    }
}

#[test]
fn scorer_bias_has_zero_gradient() {
    let spec = small_mlp();
    let params = random_params(&spec, Aggregator::Mean, 4, 3, 7);
    let batch = random_batch(&params, &spec, Aggregator::Mean, 4, 4, 3, 7);
    let mut grads = params.zeros_like();
    for ex in &batch {
        backprop::example_loss_grad(&params, &spec, Aggregator::Mean, &ex.h, ex.y, 1.0, &mut grads, true);
    }
    assert_eq!(grads.attention.bias, 0.0);
    assert!(grads.attention.weights.iter().any(|g| *g != 0.0));
}

#[test]
fn gradient_frozen_scorer_is_skipped() {
    let spec = ClassifierSpec::LogisticRegression;
    let params = random_params(&spec, Aggregator::Sum, 3, 3, 1);
    let batch = random_batch(&params, &spec, Aggregator::Sum, 1, 3, 3, 1);
    let mut grads = params.zeros_like();
    backprop::example_loss_grad(
        &params,
        &spec,
        Aggregator::Sum,
        &batch[0].h,
        batch[0].y,
        1.0,
        &mut grads,
        false,
    );
    assert!(grads.attention.weights.iter().all(|g| *g == 0.0));
}

fn tiny_dataset(samples: usize) -> Dataset {
    generate_dataset(&SynthConfig {
        layers: 2,
        hidden_dim: 4,
        samples,
        signal: Some(ProbeCell {
            layer: 2,
            position: PositionRole::Last,
        }),
        margin: 3.0,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn fast_spec() -> ModelSpec {
    ModelSpec {
        classifier: ClassifierSpec::LogisticRegression,
        ..ModelSpec::default()
    }
}

#[test]
fn one_epoch_takes_ceil_n_over_batch_steps() {
    let ds = tiny_dataset(70);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (_, report) = train(&ds, LabelKind::Functionality, &cfg, &fast_spec()).unwrap();
    assert_eq!(report.optimizer_steps, 3);
    assert_eq!(report.epoch_losses.len(), 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = tiny_dataset(10);
    for cfg in [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        },
    ] {
        let err = train(&ds, LabelKind::Functionality, &cfg, &fast_spec());
        assert!(matches!(err, Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn missing_labels_are_reported() {
    let ds = tiny_dataset(10);
    let err = train(&ds, LabelKind::Security, &TrainConfig::default(), &fast_spec());
    assert!(matches!(err, Err(Error::MissingLabel { .. })));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let ds = tiny_dataset(10);
    let spec = ModelSpec {
        hidden_dim: Some(8),
        ..fast_spec()
    };
    let err = train(&ds, LabelKind::Functionality, &TrainConfig::default(), &spec);
    assert!(matches!(err, Err(Error::DimensionMismatch(_))));
}

#[test]
fn single_class_training_warns() {
    let ds = tiny_dataset(20);
    let ids: Vec<String> = ds
        .samples()
        .iter()
        .filter(|s| s.label(LabelKind::Functionality) == Some(1))
        .map(|s| s.id.clone())
        .collect();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (_, report) = train_on(&ds, &ids, LabelKind::Functionality, &cfg, &fast_spec()).unwrap();
    assert_eq!(report.warnings.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let ds = tiny_dataset(40);
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let spec = ModelSpec {
        classifier: small_mlp(),
        ..ModelSpec::default()
    };
    let (a, mut ra) = train(&ds, LabelKind::Functionality, &cfg, &spec).unwrap();
    let (b, mut rb) = train(&ds, LabelKind::Functionality, &cfg, &spec).unwrap();
    ra.wall_clock_seconds = 0.0;
    rb.wall_clock_seconds = 0.0;
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let (c, _) = train(&ds, LabelKind::Functionality, &TrainConfig { seed: 7, ..cfg }, &spec).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn loss_decreases_on_separable_data() {
    let ds = tiny_dataset(100);
    let cfg = TrainConfig {
        epochs: 10,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let (_, report) = train(&ds, LabelKind::Functionality, &cfg, &fast_spec()).unwrap();
    assert!(
        report.epoch_losses[9] < report.epoch_losses[0],
        "{:?}",
        report.epoch_losses
    );
}

#[test]
fn selector_off_keeps_uniform_attention() {
    let ds = tiny_dataset(20);
    let spec = ModelSpec {
        selector: false,
        ..fast_spec()
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let (model, _) = train(&ds, LabelKind::Functionality, &cfg, &spec).unwrap();
    assert!(model.params.attention.weights.iter().all(|w| *w == 0.0));
}

#[test]
fn class_weights_change_the_fit() {
    let ds = tiny_dataset(30);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let weighted = TrainConfig {
        class_weights: Some(ClassWeights::Explicit {
            negative: 1.0,
            positive: 5.0,
        }),
        ..cfg.clone()
    };
    let (a, _) = train(&ds, LabelKind::Functionality, &cfg, &fast_spec()).unwrap();
    let (b, _) = train(&ds, LabelKind::Functionality, &weighted, &fast_spec()).unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn model_round_trips_exactly() {
    let ds = tiny_dataset(20);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let spec = ModelSpec {
        classifier: small_mlp(),
        aggregator: Aggregator::Concat,
        ..ModelSpec::default()
    };
    let (model, _) = train(&ds, LabelKind::Functionality, &cfg, &spec).unwrap();
    let mut bytes = Vec::new();
    let written = save_model(&model, &mut bytes).unwrap();
    assert_eq!(written as usize, bytes.len());
    assert_eq!(load_model(bytes.as_slice()).unwrap(), model);
}

#[test]
fn damaged_model_files_fail() {
    let ds = tiny_dataset(10);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (model, _) = train(&ds, LabelKind::Functionality, &cfg, &fast_spec()).unwrap();
    let mut bytes = Vec::new();
    save_model(&model, &mut bytes).unwrap();

    assert!(load_model(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(load_model(extra.as_slice()).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(load_model(magic.as_slice()), Err(Error::BadMagic)));
    let mut version = bytes.clone();
    version[6] = 9;
    assert!(matches!(
        load_model(version.as_slice()),
        Err(Error::UnsupportedVersion(9))
    ));
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(load_model(nan.as_slice()).is_err());
}

#[test]
fn config_hash_tracks_settings() {
    let a = config_hash(&TrainConfig::default(), &ModelSpec::default());
    let b = config_hash(
        &TrainConfig {
            seed: 1,
            ..TrainConfig::default()
        },
        &ModelSpec::default(),
    );
    assert_eq!(a.len(), 16);
    assert_ne!(a, b);
}
