//! Round trips through the training loop: reported metrics agree with
//! standalone evaluation, checkpoints restore bitwise, repeated runs
//! are deterministic, and subsets keep the full-data iteration budget.

use rinv_core::checkpoint;
use rinv_core::data::{stratified_subset, synth_shapes, Dataset};
use rinv_core::model::{
    build_model, Backbone, ConvSpec, HeadSpec, Model, ModelConfig, Phase,
};
use rinv_core::params::ParamSet;
use rinv_core::train::{
    evaluate, metrics_csv, train, Augment, DecaySpec, OptimizerKind, Split, TrainConfig,
};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        classes: 2,
        n_alpha: 4,
        n_f: 4,
        kernel_size: 3,
        conv: vec![ConvSpec {
            channels: 2,
            pool: false,
        }],
        backbone: Backbone::Equivariant,
        channel_rescale: false,
        head: HeadSpec::Monomial {
            distances: vec![vec![0.0, 1.0], vec![0.0, 1.0, 2.0]],
            per_channel: true,
            exponents: None,
        },
        dense: Vec::new(),
        dropout: 0.0,
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        decay: DecaySpec::None,
        batch_size: 8,
        epochs,
        elastic_net_factor: 1e-7,
        weight_decay: 0.0,
        regularization_constant: 1.0,
        augment: Augment::None,
        momentum: 0.9,
        seed: 7,
    }
}

fn trained() -> (Model, ParamSet<f32>, Dataset<f32>, Vec<rinv_core::train::MetricRow>) {
    let data = synth_shapes::<f32>(32, 8, 2, 3).unwrap();
    let test = synth_shapes::<f32>(16, 8, 2, 4).unwrap();
    let mut params = ParamSet::new();
    let model = build_model(&tiny_config(), &mut params, 11).unwrap();
    let outcome = train(&model, &mut params, &data, Some(&test), &tiny_train(2), None).unwrap();
    assert!(outcome.diverged.is_none());
    (model, params, test, outcome.history)
}

#[test]
fn final_test_metric_row_equals_standalone_evaluation() {
    let (model, params, test, history) = trained();
    let last_test = history
        .iter()
        .rev()
        .find(|r| matches!(r.split, Split::Test))
        .expect("test rows are logged every epoch");
    let (loss, error) = evaluate(&model, &params, &test, 8).unwrap();
    assert_eq!(last_test.loss, loss, "same code path, same numbers");
    assert_eq!(last_test.error, error);
}

#[test]
fn checkpoint_round_trip_restores_parameters_bitwise() {
    let (model, params, test, _) = trained();
    let dir = std::env::temp_dir().join("rinv-harness-roundtrip");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    checkpoint::save(&params, "config = \"tiny\"\n", &path).unwrap();

    let loaded = checkpoint::load::<f32>(&path).unwrap();
    let mut fresh = ParamSet::new();
    let rebuilt = build_model(&tiny_config(), &mut fresh, 99).unwrap();
    loaded.restore_into(&mut fresh).unwrap();
    for (id, entry) in params.iter() {
        let restored = fresh.id_of(&entry.name).expect("same parameter names");
        assert_eq!(
            params.get(id).data(),
            fresh.get(restored).data(),
            "checkpoint must restore {} bitwise",
            entry.name
        );
    }
    let before = evaluate(&model, &params, &test, 8).unwrap();
    let after = evaluate(&rebuilt, &fresh, &test, 8).unwrap();
    assert_eq!(before, after);
    std::fs::remove_file(&path).ok();
}

#[test]
fn identical_seeds_reproduce_identical_metrics() {
    let run = || {
        let data = synth_shapes::<f32>(32, 8, 2, 3).unwrap();
        let test = synth_shapes::<f32>(16, 8, 2, 4).unwrap();
        let mut params = ParamSet::new();
        let model = build_model(&tiny_config(), &mut params, 11).unwrap();
        let outcome =
            train(&model, &mut params, &data, Some(&test), &tiny_train(3), None).unwrap();
        metrics_csv(&outcome.history)
    };
    assert_eq!(run(), run(), "training must be a pure function of seeds");
}

#[test]
fn training_a_subset_keeps_the_full_data_iteration_budget() {
    let data = synth_shapes::<f32>(32, 8, 2, 3).unwrap();
    let subset = stratified_subset(&data, 16, 21).unwrap();
    assert_eq!(subset.len(), 16);

    let mut params = ParamSet::new();
    let model = build_model(&tiny_config(), &mut params, 11).unwrap();
    let full = train(&model, &mut params, &data, None, &tiny_train(2), None).unwrap();

    let mut params = ParamSet::new();
    let model = build_model(&tiny_config(), &mut params, 11).unwrap();
    let sub = train(&model, &mut params, &subset, None, &tiny_train(2), Some(data.len())).unwrap();

    assert_eq!(
        full.iterations, sub.iterations,
        "subset runs stretch epochs to spend the same iteration count"
    );
    assert!(sub.completed_epochs > full.completed_epochs);
}
