mod common;

use fieldsel_core::baselines::BaselineKind;
use fieldsel_core::data::{split_dataset, Provenance, TabularDataset};
use fieldsel_core::importance::ImportanceConfig;
use fieldsel_core::model::{Arch, CtrModel, Field};
use fieldsel_core::trainer::{evaluate, mean_loss, train, TrainConfig};
use fieldsel_core::Error;

use common::{planted_spec, planted_splits};

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn labels_independent_of_fields_give_chance_auc() {
    for s in 0..5u64 {
        let spec = planted_spec(50_000, 6, vec![], 0.3, 100 + s);
        let splits = planted_splits(&spec);
        let init = CtrModel::new(splits.train.schema(4).unwrap(), Arch::Mlp, &[8], s).unwrap();
        let (model, _) = train(&init, &splits.train, &splits.validation, &quick(s, 3)).unwrap();
        let auc = evaluate(&model, &splits.test).unwrap().auc;
        assert!((0.47..=0.53).contains(&auc), "seed {s}: auc {auc}");
    }
}

/// Label is 1 exactly when field 0 takes one of its first five categories;
/// the other two fields are noise.
fn separable(seed: u64) -> TabularDataset {
    use rand::Rng;
    let mut rng = fieldsel_core::seed::rng(seed, "separable", 0);
    let n = 5000;
    let mut indices = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = rng.random_range(1..=10);
        indices.extend([x0, rng.random_range(1..=10), rng.random_range(1..=10)]);
        labels.push(u8::from(x0 <= 5));
    }
    let fields = (0..3)
        .map(|f| Field {
            name: format!("c{f}"),
            vocab_size: 11,
        })
        .collect();
    TabularDataset::new(fields, indices, labels, Provenance::default()).unwrap()
}

#[test]
fn linear_arch_separates_separable_data() {
    for s in 0..3u64 {
        let splits = split_dataset(&separable(s), s).unwrap();
        let init = CtrModel::new(splits.train.schema(4).unwrap(), Arch::Linear, &[], s).unwrap();
        let before = mean_loss(&init, &splits.train).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..quick(s, 10)
        };
        let (model, _) = train(&init, &splits.train, &splits.validation, &cfg).unwrap();
        let after = mean_loss(&model, &splits.train).unwrap();
        let auc = evaluate(&model, &splits.test).unwrap().auc;
        assert!(after < before, "seed {s}: loss {before} -> {after}");
        assert!(auc >= 0.95, "seed {s}: auc {auc}");
    }
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let splits = planted_splits(&planted_spec(500, 4, vec![0], 0.3, 1));
    let init = CtrModel::new(splits.train.schema(4).unwrap(), Arch::FmMlp, &[8], 3).unwrap();
    let (model, history) = train(&init, &splits.train, &splits.validation, &quick(0, 0)).unwrap();
    assert_eq!(model.to_text(), init.to_text());
    assert!(history.epochs.is_empty());
    assert_eq!(history.best_epoch, None);
}

#[test]
fn zero_lambda_ignores_every_regularizer_setting() {
    let splits = planted_splits(&planted_spec(2_000, 5, vec![0, 1], 0.3, 2));
    let init = CtrModel::new(splits.train.schema(4).unwrap(), Arch::Mlp, &[8], 4).unwrap();
    let plain = train(&init, &splits.train, &splits.validation, &quick(9, 3)).unwrap().0;
    for kind in [BaselineKind::Swap, BaselineKind::Uniform, BaselineKind::BoundaryProjection] {
        let mut cfg = quick(9, 3);
        cfg.importance = ImportanceConfig {
            baseline: kind,
            steps_train: 4,
            steps_val: 4,
            lambda: 0.0,
            seed: 77,
            ..ImportanceConfig::default()
        };
        let other = train(&init, &splits.train, &splits.validation, &cfg).unwrap().0;
        assert_eq!(other.to_text(), plain.to_text(), "{kind}");
    }
}

#[test]
fn regularized_training_runs_for_every_baseline_kind() {
    let splits = planted_splits(&planted_spec(1_500, 4, vec![0, 1], 0.3, 3));
    let init = CtrModel::new(splits.train.schema(4).unwrap(), Arch::Mlp, &[8], 5).unwrap();
    let plain = train(&init, &splits.train, &splits.validation, &quick(1, 2)).unwrap().0;
    for kind in BaselineKind::ALL {
        let mut cfg = quick(1, 2);
        cfg.importance = ImportanceConfig {
            baseline: kind,
            steps_train: 2,
            lambda: 0.05,
            ..ImportanceConfig::default()
        };
        let (model, history) = train(&init, &splits.train, &splits.validation, &cfg).unwrap();
        assert_ne!(model.to_text(), plain.to_text(), "{kind}");
        assert!(history.epochs.iter().all(|e| e.train_regularizer > 0.0), "{kind}");
    }
}

#[test]
fn training_is_bit_reproducible_and_history_consistent() {
    let splits = planted_splits(&planted_spec(3_000, 6, vec![0, 2], 0.3, 4));
    let init = CtrModel::new(splits.train.schema(4).unwrap(), Arch::FmMlp, &[8, 4], 6).unwrap();
    let mut cfg = quick(5, 6);
    cfg.importance.lambda = 0.01;
    let (a, ha) = train(&init, &splits.train, &splits.validation, &cfg).unwrap();
    let (b, hb) = train(&init, &splits.train, &splits.validation, &cfg).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(ha.to_csv(), hb.to_csv());
    assert!(ha.epochs.len() <= cfg.max_epochs);
    let best = ha.best_epoch.unwrap();
    let max_auc = ha.epochs.iter().map(|e| e.val_auc).fold(f64::MIN, f64::max);
    assert_eq!(ha.epochs[best].val_auc, max_auc);
    assert_eq!(evaluate(&a, &splits.validation).unwrap().auc, max_auc);
}

#[test]
fn single_class_evaluation_reports_logloss() {
    let ds = TabularDataset::new(
        vec![Field {
            name: "a".into(),
            vocab_size: 3,
        }],
        vec![1, 2, 1],
        vec![1, 1, 1],
        Provenance::default(),
    )
    .unwrap();
    let model = CtrModel::new(ds.schema(2).unwrap(), Arch::Linear, &[], 0).unwrap();
    match evaluate(&model, &ds) {
        Err(Error::SingleClass { logloss }) => assert!((logloss - std::f64::consts::LN_2).abs() < 1e-3),
        other => panic!("unexpected {other:?}"),
    }
}
