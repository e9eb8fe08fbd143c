// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use craft_core::experiment::prepare;
use craft_core::synthetic::periodic_series;
use craft_core::train::{backward, Batch};
use craft_core::{evaluate, train, CraftError, Retriever, SplitScheme, TrainConfig};

#[test]
fn gradients_match_central_differences() {
    let setup = tiny_setup(11);
    let batch = tiny_batch(&setup, 3, 2);
    for seed in [1, 2, 3] {
        let model = tiny_model(seed, 0.7);
        let worst = gradient_check(&model, &batch, 1e-5);
        for (name, err) in craft_core::train::Gradients::NAMES.iter().zip(worst) {
            assert!(err < 1e-4, "{name}: relative error {err:e} (seed {seed})");
        }
    }
}

#[test]
fn duplicated_batch_leaves_gradients_unchanged() {
    let setup = tiny_setup(12);
    let batch = tiny_batch(&setup, 3, 1);
    let doubled = Batch {
        inputs: batch.inputs.iter().chain(&batch.inputs).copied().collect(),
        targets: batch.targets.iter().chain(&batch.targets).copied().collect(),
        refs: batch.refs.iter().chain(&batch.refs).cloned().collect(),
    };
    let model = tiny_model(5, 0.3);
    let (l1, g1) = backward(&model, &batch).unwrap();
    let (l2, g2) = backward(&model, &doubled).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_alpha_disconnects_the_head() {
    let setup = tiny_setup(13);
    let batch = tiny_batch(&setup, 4, 2);
    let (_, grads) = backward(&tiny_model(9, 0.0), &batch).unwrap();
    assert!(all_zero(&grads, &[4, 5]));
    assert!(!all_zero(&grads, &[0]));
}

#[test]
fn backward_rejects_non_finite_loss() {
    let setup = tiny_setup(14);
    let batch = tiny_batch(&setup, 2, 1);
    let mut model = tiny_model(1, 0.1);
    model.b2[0] = f64::INFINITY;
    assert!(matches!(backward(&model, &batch), Err(CraftError::NonFinite(_))));
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        hidden: 16,
        batch_size: 16,
        seed: 77,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let series = periodic_series(&[12.0, 8.0], 400, 0.05, 3).unwrap();
    let data = prepare(&series, SplitScheme::DEFAULT_RATIOS, 24, 6).unwrap();
    let kb = data.build_kb(1, 4).unwrap();
    let cfg = small_config(0);
    let out = train(&data.train, &data.val, &kb, &cfg).unwrap();
    let again = train(&data.train, &data.val, &kb, &cfg).unwrap();
    assert_eq!(out.model.to_bytes().unwrap(), again.model.to_bytes().unwrap());
    assert!(out.log.epochs.is_empty());
    assert_eq!(out.log.best_epoch, None);
}

#[test]
fn training_is_bit_deterministic() {
    let series = periodic_series(&[12.0, 8.0, 5.0], 400, 0.1, 4).unwrap();
    let data = prepare(&series, SplitScheme::DEFAULT_RATIOS, 24, 6).unwrap();
    let kb = data.build_kb(2, 4).unwrap();
    let cfg = small_config(3);
    let a = train(&data.train, &data.val, &kb, &cfg).unwrap();
    let b = train(&data.train, &data.val, &kb, &cfg).unwrap();
    assert_eq!(a.model.to_bytes().unwrap(), b.model.to_bytes().unwrap());
    let strip = |log: &craft_core::TrainingLog| -> Vec<(u64, u64)> {
        log.epochs.iter().map(|e| (e.train_mse.to_bits(), e.val_mse.to_bits())).collect()
    };
    assert_eq!(strip(&a.log), strip(&b.log));

    let cached = TrainConfig {
        cache_retrieval: true,
        ..cfg.clone()
    };
    let c = train(&data.train, &data.val, &kb, &cached).unwrap();
    assert_eq!(a.model.to_bytes().unwrap(), c.model.to_bytes().unwrap());
}

#[test]
fn frozen_head_stays_at_initialization() {
    let series = periodic_series(&[12.0, 8.0], 400, 0.05, 5).unwrap();
    let data = prepare(&series, SplitScheme::DEFAULT_RATIOS, 24, 6).unwrap();
    let kb = data.build_kb(1, 4).unwrap();
    let init = train(&data.train, &data.val, &kb, &small_config(0)).unwrap().model;
    let frozen = TrainConfig {
        freeze_head: true,
        ..small_config(2)
    };
    let out = train(&data.train, &data.val, &kb, &frozen).unwrap().model;
    assert_eq!(out.head_w, init.head_w);
    assert_eq!(out.head_b, init.head_b);
    assert_ne!(out.w1, init.w1);
}

#[test]
fn huge_learning_rate_reports_divergence_or_finishes_finite() {
    let series = periodic_series(&[12.0, 8.0], 400, 0.05, 6).unwrap();
    let data = prepare(&series, SplitScheme::DEFAULT_RATIOS, 24, 6).unwrap();
    let kb = data.build_kb(1, 4).unwrap();
    let cfg = TrainConfig {
        lr: 1e200,
        ..small_config(3)
    };
    match train(&data.train, &data.val, &kb, &cfg) {
        Err(CraftError::Diverged { last_finite, .. }) => assert!(last_finite.is_finite()),
        Ok(out) => assert!(out.model.is_finite()),
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn fifty_epochs_halve_validation_error() {
    let series = periodic_series(&[24.0; 4], 3000, 0.1, 21).unwrap();
    let data = prepare(&series, SplitScheme::DEFAULT_RATIOS, 96, 24).unwrap();
    let kb = data.build_kb(3, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        patience: 0,
        hidden: 64,
        cache_retrieval: true,
        seed: 5,
        ..TrainConfig::default()
    };
    let retriever = Retriever::new(&kb);
    let val_windows = craft_core::sliding_windows(&data.val, 96, 24, 1).unwrap();
    let untrained = train(&data.train, &data.val, &kb, &TrainConfig { epochs: 0, ..cfg.clone() }).unwrap();
    let before = evaluate(&untrained.model, &retriever, &val_windows, 1, 32).unwrap().mse;
    let out = train(&data.train, &data.val, &kb, &cfg).unwrap();
    let after = evaluate(&out.model, &retriever, &val_windows, 1, 32).unwrap().mse;
    assert!(after < 0.5 * before, "val mse {after} vs untrained {before}");
    let last = out.log.epochs.last().unwrap().train_mse;
    assert!(last < out.log.initial_train_mse.unwrap());
}
