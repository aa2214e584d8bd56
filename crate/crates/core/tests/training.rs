mod common;

use common::rng;
use hydravit::checkpoint::{encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint};
use hydravit::data::{synth_generate, CoocSpec, Dataset, LabelVector, Sample};
use hydravit::evaluation::{evaluate_dataset, TieMode};
use hydravit::params::Parameters;
use hydravit::train::{batch_gradient, train, train_step, TrainArtifacts, TrainConfig, TrainState};
use hydravit::{CheckpointError, Error, HydraVit, ModelConfig};

fn synthetic(classes: usize, n: usize, seed: u64) -> Dataset {
    let spec = CoocSpec::independent(classes, 0.4, 16, seed);
    synth_generate(&spec, n).unwrap().into_dataset()
}

fn config(lr: f64, epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        learning_rate: lr,
        epochs,
        seed: 3,
        ..TrainConfig::standard()
    }
}

fn state(classes: usize, data: &Dataset, cfg: TrainConfig) -> TrainState {
    TrainState::initialize(&ModelConfig::miniature(classes), cfg, data).unwrap()
}

/// Lower bound on the aggregate term: each positive cell costs at least
/// `-ln(w_A)` because the aggregate probability is at most 1.
fn mlce_floor(data: &Dataset, w_aggregate: f64, classes: usize) -> f64 {
    let positives: usize = data.samples.iter().map(|s| s.labels.count_ones()).sum();
    positives as f64 * -w_aggregate.min(1.0).ln() / (data.len() * classes) as f64
}

#[test]
fn single_batch_overfits() {
    let data = synthetic(3, 8, 1);
    let mut st = state(3, &data, config(1e-3, 0, 8));
    let batch: Vec<&Sample> = data.samples.iter().collect();
    let initial = batch_gradient(&st.model, &batch, true).unwrap().0;
    for _ in 0..500 {
        train_step(&mut st, &batch).unwrap();
    }
    let mid = batch_gradient(&st.model, &batch, true).unwrap().0;
    assert!(mid.total < 0.75 * initial.total, "{} -> {}", initial.total, mid.total);
    let floor = mlce_floor(&data, st.model.weights.w_aggregate, 3);
    assert!(mid.mlce >= floor - 1e-9, "mlce {} below floor {floor}", mid.mlce);
    for _ in 0..500 {
        train_step(&mut st, &batch).unwrap();
    }
    let end = batch_gradient(&st.model, &batch, true).unwrap().0;
    assert!(end.bce_mean < 0.05, "individual branches did not fit: {}", end.bce_mean);
    assert!(end.total < mid.total);
}

#[test]
fn small_steps_descend() {
    let data = synthetic(3, 8, 2);
    let mut st = state(3, &data, config(1e-5, 0, 8));
    let batch: Vec<&Sample> = data.samples.iter().collect();
    let initial = train_step(&mut st, &batch).unwrap().total;
    for _ in 0..49 {
        train_step(&mut st, &batch).unwrap();
    }
    let after = batch_gradient(&st.model, &batch, true).unwrap().0.total;
    assert!(after < initial, "{after} !< {initial}");
}

#[test]
fn every_parameter_group_moves() {
    let data = synthetic(3, 6, 3);
    let mut st = state(3, &data, config(1e-3, 0, 6));
    let before = st.model.clone();
    let batch: Vec<&Sample> = data.samples.iter().collect();
    train_step(&mut st, &batch).unwrap();
    for (a, b) in before.params().iter().zip(st.model.params()) {
        assert_ne!(a.data, b.data, "{} did not change", a.name);
    }
}

#[test]
fn clamped_fixed_point_does_not_move() {
    // All-zero labels, individual probabilities near 0 and aggregate near 0,
    // consistency scales zero: every clamped loss term sits at its floor.
    let data = Dataset {
        class_names: vec!["a".into(), "b".into()],
        samples: synthetic(2, 4, 4)
            .samples
            .into_iter()
            .map(|s| Sample {
                labels: LabelVector::zeros(2),
                ..s
            })
            .collect(),
    };
    let mut model = HydraVit::new(&ModelConfig::miniature(2), &[1, 1], 2, &mut rng(5)).unwrap();
    for head in [
        model.heads.individual.as_mut().unwrap(),
        model.heads.aggregate.as_mut().unwrap(),
    ] {
        head.weight.fill(0.0);
        head.bias.fill(-40.0);
    }
    model.weights.alpha = 0.0;
    model.weights.beta = 0.0;
    let mut st = TrainState::new(config(1e-3, 0, 4), model).unwrap();
    let before = st.model.clone();
    let batch: Vec<&Sample> = data.samples.iter().collect();
    train_step(&mut st, &batch).unwrap();
    for (a, b) in before.params().iter().zip(st.model.params()) {
        for (x, y) in a.data.iter().zip(b.data) {
            assert!((x - y).abs() < 1e-9, "{} moved", a.name);
        }
    }
}

#[test]
fn zero_epochs_leave_state_untouched() {
    let data = synthetic(2, 10, 6);
    let mut st = state(2, &data, config(1e-3, 0, 4));
    let before = st.clone();
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("metrics.csv");
    let out = train(
        &mut st,
        &data,
        None,
        &TrainArtifacts {
            checkpoint_dir: None,
            metrics_csv: Some(metrics.clone()),
        },
    )
    .unwrap();
    assert!(out.is_empty());
    assert_eq!(st, before);
    assert_eq!(std::fs::read_to_string(metrics).unwrap().lines().count(), 1);
}

#[test]
fn deterministic_runs_are_bitwise_identical() {
    let data = synthetic(2, 24, 7);
    let run = || {
        let mut st = state(2, &data, config(1e-3, 2, 5));
        train(&mut st, &data, Some(&data), &TrainArtifacts::default()).unwrap();
        st
    };
    assert_eq!(run(), run());
}

#[test]
fn ordered_and_tree_reductions_agree_closely() {
    let data = synthetic(2, 9, 8);
    let model = HydraVit::new(&ModelConfig::miniature(2), &[3, 4], 9, &mut rng(9)).unwrap();
    let batch: Vec<&Sample> = data.samples.iter().collect();
    let (la, ga) = batch_gradient(&model, &batch, true).unwrap();
    let (lb, gb) = batch_gradient(&model, &batch, false).unwrap();
    assert!((la.total - lb.total).abs() < 1e-12);
    for (a, b) in ga.params().iter().zip(gb.params()) {
        for (x, y) in a.data.iter().zip(b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = synthetic(2, 20, 10);
    let dir = tempfile::tempdir().unwrap();
    let mut full = state(2, &data, config(1e-3, 3, 6));
    train(&mut full, &data, None, &TrainArtifacts::default()).unwrap();

    let mut part = state(2, &data, config(1e-3, 1, 6));
    train(
        &mut part,
        &data,
        None,
        &TrainArtifacts {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            metrics_csv: None,
        },
    )
    .unwrap();
    let mut resumed = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
    resumed.config.epochs = 3;
    train(&mut resumed, &data, None, &TrainArtifacts::default()).unwrap();
    assert_eq!(resumed.model, full.model);
    assert_eq!(resumed.history, full.history);
}

#[test]
fn checkpoint_round_trip_reproduces_forward_bitwise() {
    let data = synthetic(3, 12, 11);
    let mut st = state(3, &data, config(1e-3, 1, 4));
    train(&mut st, &data, None, &TrainArtifacts::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &st).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, st);
    let img = &data.samples[0].image;
    assert_eq!(
        back.model.forward(img).unwrap().outputs,
        st.model.forward(img).unwrap().outputs
    );
    assert!(!dir.path().join("a.ckpt.tmp").exists());
}

#[test]
fn truncated_checkpoint_names_missing_section() {
    let data = synthetic(3, 12, 12);
    let st = state(3, &data, config(1e-3, 0, 4));
    let bytes = encode_checkpoint(&st).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Checkpoint(CheckpointError::Truncated { section })) => assert_eq!(section, "RNGS"),
        other => panic!("unexpected {other:?}"),
    }
    std::fs::write(&path, &bytes[..100]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Checkpoint(CheckpointError::Truncated { section })) if section == "CONF"
    ));
}

#[test]
fn three_class_checkpoint_into_four_class_model_fails_on_head_shape() {
    let data = synthetic(3, 6, 13);
    let st = state(3, &data, config(1e-3, 0, 4));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c3.ckpt");
    save_checkpoint(&path, &st).unwrap();
    match load_checkpoint_for(&path, &ModelConfig::miniature(4)) {
        Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name, found, expected })) => {
            assert!(name.starts_with("heads."), "{name}");
            assert_eq!(found[0], 3);
            assert_eq!(expected[0], 4);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn short_run_learns_the_synthetic_task() {
    let spec = CoocSpec::independent(2, 0.4, 16, 14);
    let train_set = synth_generate(&spec, 300).unwrap().into_dataset();
    let test = synth_generate(&CoocSpec { seed: 15, ..spec }, 100)
        .unwrap()
        .into_dataset();
    let mut st = state(2, &train_set, config(1e-3, 5, 16));
    train(&mut st, &train_set, None, &TrainArtifacts::default()).unwrap();
    let report = evaluate_dataset(&st.model, &test, TieMode::Literal).unwrap();
    assert!(report.macro_mean > 0.8, "{}", report.macro_mean);
}
