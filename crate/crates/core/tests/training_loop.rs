use algebraformer::bvp::{self, EquationKind};
use algebraformer::linalg::Vector;
use algebraformer::model::{self, ModelConfig};
use algebraformer::training::{self, SupervisedSet, TrainConfig, TrainError};
use proptest::prelude::*;

fn small_config() -> ModelConfig {
    ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, ..ModelConfig::for_systems("desk", 6).unwrap() }
}

fn sets(count: usize) -> (SupervisedSet, SupervisedSet) {
    let ds = bvp::generate_dataset(EquationKind::Diffusion, count, 6, 4).unwrap();
    let (tr, te) = ds.samples.split_at(count * 4 / 5);
    (SupervisedSet::from_systems(tr).unwrap(), SupervisedSet::from_systems(te).unwrap())
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, lr_max: 3e-3, lr_min: 3e-4, seed: 8, ..TrainConfig::default() }
}

#[test]
fn zero_epochs_leave_initialization_untouched() {
    let (tr, te) = sets(40);
    let init = model::init_weights(&small_config(), 8).unwrap();
    let full = TrainConfig { batch_size: tr.len(), ..quick(0) };
    let single = TrainConfig { batch_size: 1, ..quick(0) };
    let (a, la) = training::train(&small_config(), &full, &tr, &te, None).unwrap();
    let (b, lb) = training::train(&small_config(), &single, &tr, &te, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, init);
    assert!(la.rows.is_empty() && lb.rows.is_empty());
}

#[test]
fn training_is_deterministic_and_learns() {
    let (tr, te) = sets(120);
    let (w1, log1) = training::train(&small_config(), &quick(12), &tr, &te, None).unwrap();
    let (w2, log2) = training::train(&small_config(), &quick(12), &tr, &te, None).unwrap();
    assert_eq!(w1, w2);
    assert_eq!(log1.without_timing(), log2.without_timing());
    assert_eq!(log1.rows.len(), 12);
    let losses = log1.train_losses();
    assert!(losses[11] < 0.5 * losses[0], "{losses:?}");

    let other = TrainConfig { seed: 9, ..quick(12) };
    let (w3, _) = training::train(&small_config(), &other, &tr, &te, None).unwrap();
    assert_ne!(w1, w3);
}

#[test]
fn learning_rate_follows_cosine_then_fine_tune_is_constant() {
    let (tr, te) = sets(40);
    let (w, log) = training::train(&small_config(), &quick(4), &tr, &te, None).unwrap();
    assert!(log.rows.windows(2).all(|r| r[1].lr <= r[0].lr));
    let (_, ft) = training::fine_tune(w, &quick(4), &tr, &te, 3, None).unwrap();
    assert_eq!(ft.rows.len(), 3);
    assert!(ft.rows.iter().all(|r| r.lr == 5e-5));
}

#[test]
fn checkpoints_are_written_and_reload_exactly() {
    let (tr, te) = sets(40);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: Some(2), ..quick(4) };
    let (w, log) = training::train(&small_config(), &cfg, &tr, &te, Some(dir.path())).unwrap();
    for name in ["checkpoint_epoch_0002.afw", "checkpoint_epoch_0004.afw", "model.afw"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert_eq!(model::load_weights(&dir.path().join("model.afw")).unwrap(), w);
    assert_eq!(model::load_weights(&dir.path().join("checkpoint_epoch_0004.afw")).unwrap(), w);
    let csv = dir.path().join("metrics.csv");
    log.write_csv(&csv).unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().next(), Some(training::METRICS_HEADER));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn non_finite_loss_is_reported_as_divergence() {
    let (mut tr, te) = sets(20);
    tr.examples[0].target = Vector::new(vec![f64::NAN; 6]);
    let err = training::train(&small_config(), &quick(2), &tr, &te, None).unwrap_err();
    assert!(matches!(err, TrainError::Divergence { epoch: 0, .. }), "{err}");
}

#[test]
fn mismatched_model_and_data_are_rejected() {
    let (tr, te) = sets(20);
    let wrong = ModelConfig::for_systems("desk", 8).unwrap();
    assert!(matches!(training::train(&wrong, &quick(1), &tr, &te, None), Err(TrainError::DimensionMismatch(_))));
    let empty = SupervisedSet::default();
    assert!(matches!(training::train(&small_config(), &quick(1), &empty, &te, None), Err(TrainError::EmptyDataset)));
}

#[test]
fn noise_benchmark_shapes_and_direct_solver_behavior() {
    let ds = bvp::generate_dataset(EquationKind::Diffusion, 10, 6, 5).unwrap();
    let w = model::init_weights(&small_config(), 1).unwrap();
    let rows = training::noise_benchmark(&w, &ds.samples, &[1e-4, 1e-3, 1e-2, 1e-1], 1e-15, 3).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].level, 0.0);
    assert!(rows[0].lu <= 1e-12);
    assert!(rows.windows(2).all(|r| r[1].lu > r[0].lu));
    let csv = training::noise_table_csv(&rows);
    assert_eq!(csv.lines().next(), Some("level,model,lu,qr,svd"));
    assert_eq!(csv.lines().count(), 6);

    let again = training::noise_benchmark(&w, &ds.samples, &[1e-4, 1e-3, 1e-2, 1e-1], 1e-15, 3).unwrap();
    assert_eq!(rows, again);

    let wrong = model::init_weights(&ModelConfig::for_systems("desk", 8).unwrap(), 1).unwrap();
    assert!(training::noise_benchmark(&wrong, &ds.samples, &[1e-3], 1e-15, 3).is_err());
}

#[test]
fn training_noise_changes_the_run() {
    let (tr, te) = sets(40);
    let clean = training::train(&small_config(), &quick(2), &tr, &te, None).unwrap().0;
    let noisy_cfg = TrainConfig { train_noise: 1e-2, ..quick(2) };
    let noisy = training::train(&small_config(), &noisy_cfg, &tr, &te, None).unwrap().0;
    assert_ne!(clean, noisy);
}

proptest! {
    #[test]
    fn relative_mse_is_scale_invariant(
        truth in prop::collection::vec(-5.0f64..5.0, 1..12),
        factor in -3.0f64..3.0,
        c in prop::sample::select(vec![-1e3, -2.0, -0.5, 1e-3, 0.7, 4.0, 1e6]),
    ) {
        prop_assume!(truth.iter().any(|t| t.abs() > 1e-3));
        let pred: Vec<f64> = truth.iter().map(|t| factor * t).collect();
        let base = training::relative_mse(&pred, &truth).unwrap();
        let sp: Vec<f64> = pred.iter().map(|p| c * p).collect();
        let st: Vec<f64> = truth.iter().map(|t| c * t).collect();
        let scaled = training::relative_mse(&sp, &st).unwrap();
        prop_assert!((scaled - base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn cosine_schedule_is_monotone(total in 1usize..500, max in 1e-5f64..1e-2, ratio in 0.0f64..1.0) {
        let min = max * ratio;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = training::cosine_lr(s, total, max, min);
            prop_assert!(lr <= prev && lr >= min - 1e-18 && lr <= max);
            prev = lr;
        }
    }
}
