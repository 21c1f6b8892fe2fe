//! Training engine: step semantics, checkpoints, resume and epoch accounting.

mod common;

use std::fs;

use anomgan::eval::Aggregation;
use anomgan::model::Model;
use anomgan::objectives::LossWeights;
use anomgan::train::{config_hash, train, train_step, Checkpoint, Optimizers, TrainConfig, TrainRun, LAST_CHECKPOINT};
use anomgan::Error;
use anomgan_tensor::Tensor;
use common::runs::{small_model, synth, whole_images};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    common::uniform(&[n, 3, size, size], -0.9, 0.9, &mut rng)
}

fn quick_train(batch_size: usize, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size,
        max_epochs,
        learning_rate: 1e-3,
        ..Default::default()
    }
}

#[test]
fn discriminator_update_ignores_generator_objective() {
    let cfg = small_model(16, 2, 4);
    let x = batch(2, 16, 1);
    let mut d_states = Vec::new();
    let mut g_states = Vec::new();
    for weights in [LossWeights::default(), LossWeights::new(0.0, 1.0, 0.0)] {
        let mut model = Model::build(&cfg, 3).unwrap();
        let tc = TrainConfig {
            loss_weights: weights,
            ..quick_train(2, 1)
        };
        let mut optim = Optimizers::new(&model, &tc);
        train_step(&mut model, &mut optim, &x, &tc).unwrap();
        d_states.push(model.discriminator.params().values());
        g_states.push(model.generator.params().values());
    }
    assert_eq!(d_states[0], d_states[1]);
    assert_ne!(g_states[0], g_states[1]);
}

#[test]
fn spectral_sigmas_stay_positive_and_finite() {
    let cfg = small_model(16, 2, 4);
    let mut model = Model::build(&cfg, 5).unwrap();
    let tc = quick_train(2, 1);
    let mut optim = Optimizers::new(&model, &tc);
    for s in 0..5 {
        train_step(&mut model, &mut optim, &batch(2, 16, s), &tc).unwrap();
    }
    for store in [model.generator.params(), model.discriminator.params()] {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if let Some(state) = store.spectral(id) {
                assert!(state.sigma.is_finite() && state.sigma > 0.0, "{}", store.name(id));
                assert_eq!(state.n_power_iterations, 1);
            }
        }
    }
}

#[test]
fn non_finite_batch_leaves_model_untouched() {
    let cfg = small_model(16, 2, 4);
    let mut model = Model::build(&cfg, 5).unwrap();
    let tc = quick_train(2, 1);
    let mut optim = Optimizers::new(&model, &tc);
    let before = (model.clone(), optim.clone());
    let mut x = batch(2, 16, 0);
    x.data_mut()[7] = f64::NAN;
    assert!(matches!(train_step(&mut model, &mut optim, &x, &tc), Err(Error::NonFinite { .. })));
    assert_eq!((model, optim), before);
}

#[test]
fn one_epoch_takes_ceil_n_over_b_steps() {
    let dir = tempfile::tempdir().unwrap();
    let (train_m, _) = synth(&dir.path().join("data"), 32, 10, 1, 1, 0);
    let data = whole_images(train_m, 32);
    let model = small_model(32, 2, 4);
    let out = dir.path().join("run");
    let tc = quick_train(4, 1);
    let outcome = train(TrainRun {
        model: &model,
        config: &tc,
        seed: 1,
        eta: 0.9,
        aggregation: Aggregation::Max,
        train_data: &data,
        validation: None,
        out_dir: &out,
        resume: None,
    })
    .unwrap();
    assert_eq!(outcome.history.len(), 1);
    let ckpt = Checkpoint::load(&outcome.last_checkpoint, None).unwrap();
    assert_eq!(ckpt.optimizers.generator.steps, 3);
    assert_eq!(ckpt.optimizers.discriminator.steps, 3);
    assert!(outcome.best_checkpoint.exists());
    let log = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let (train_m, _) = synth(&dir.path().join("data"), 32, 4, 1, 1, 0);
    let data = whole_images(train_m, 32);
    let model = small_model(32, 2, 4);
    let tc = quick_train(2, 1);
    let out = dir.path().join("run");
    let outcome = train(TrainRun {
        model: &model,
        config: &tc,
        seed: 4,
        eta: 0.9,
        aggregation: Aggregation::Max,
        train_data: &data,
        validation: None,
        out_dir: &out,
        resume: None,
    })
    .unwrap();
    let bytes = fs::read(&outcome.last_checkpoint).unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes, None).unwrap();
    assert_eq!(ckpt.model, outcome.model);
    assert_eq!(ckpt.to_bytes().unwrap(), bytes);

    let hash = config_hash(&model, &tc, 4);
    assert!(Checkpoint::from_bytes(&bytes, Some(&hash)).is_ok());
    let other = config_hash(&model, &tc, 5);
    assert!(matches!(Checkpoint::from_bytes(&bytes, Some(&other)), Err(Error::Checkpoint(_))));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    let err = Checkpoint::from_bytes(&flipped, None).unwrap_err();
    assert!(err.to_string().contains("hash mismatch"), "{err}");

    for cut in [0, 7, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], None), Err(Error::Checkpoint(_))));
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (train_m, _) = synth(&dir.path().join("data"), 32, 6, 1, 1, 0);
    let data = whole_images(train_m, 32);
    let model = small_model(32, 2, 4);
    let run = |tc: &TrainConfig, out: &std::path::Path, resume| {
        train(TrainRun {
            model: &model,
            config: tc,
            seed: 8,
            eta: 0.9,
            aggregation: Aggregation::Max,
            train_data: &data,
            validation: None,
            out_dir: out,
            resume,
        })
        .unwrap()
    };
    let straight = run(&quick_train(4, 2), &dir.path().join("a"), None);

    let part = dir.path().join("b");
    run(&quick_train(4, 1), &part, None);
    let ckpt = Checkpoint::load(&part.join(LAST_CHECKPOINT), None).unwrap();
    let resumed = run(&quick_train(4, 2), &part, Some(ckpt));

    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.model, straight.model);
    assert_eq!(
        fs::read_to_string(part.join("metrics.csv")).unwrap(),
        fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap()
    );
}

#[test]
fn training_rejects_anomalous_records_and_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (train_m, test_m) = synth(&dir.path().join("data"), 32, 2, 1, 1, 0);
    let model = small_model(32, 2, 4);
    let tc = quick_train(2, 1);
    let test_data = whole_images(test_m, 32);
    let attempt = |data, resume| {
        train(TrainRun {
            model: &model,
            config: &tc,
            seed: 1,
            eta: 0.9,
            aggregation: Aggregation::Max,
            train_data: data,
            validation: None,
            out_dir: &dir.path().join("run"),
            resume,
        })
    };
    assert!(matches!(attempt(&test_data, None), Err(Error::Dataset(_))));

    let data = whole_images(train_m, 32);
    attempt(&data, None).unwrap();
    let mut ckpt = Checkpoint::load(&dir.path().join("run").join(LAST_CHECKPOINT), None).unwrap();
    ckpt.meta.config_hash = "0".repeat(64);
    assert!(matches!(attempt(&data, Some(ckpt)), Err(Error::Checkpoint(_))));
}
