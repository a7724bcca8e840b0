mod common;

use fieldsel_core::data::Splits;
use fieldsel_core::importance::{ImportanceConfig, ImportanceReport};
use fieldsel_core::pipeline::{
    retrain, run_selection, select_top_k, selection_curve, SelectionConfig,
};
use fieldsel_core::trainer::predict_dataset;

use common::{planted_spec, planted_splits};

fn small_config(seed: u64) -> SelectionConfig {
    let mut cfg = SelectionConfig {
        seed,
        ..SelectionConfig::default()
    };
    cfg.train.max_epochs = 3;
    cfg.train.importance.lambda = 0.01;
    cfg
}

fn small_splits(seed: u64) -> Splits {
    planted_splits(&planted_spec(4_000, 8, vec![1, 3, 5], 0.3, seed))
}

#[test]
fn full_selection_matches_the_reference_exactly() {
    let splits = small_splits(1);
    let out = run_selection(&splits, &small_config(1), 8).unwrap();
    assert_eq!(out.result.auc, out.result.reference_auc);
    assert_eq!(out.result.logloss, out.result.reference_logloss);
    assert_eq!(out.result.ratio, 1.0);
    assert_eq!(out.result.ratio_percent(), "100.00%");
    assert!(!out.result.significant_auc_change);
    // Retraining on all columns, whatever their score order, is the reference.
    let again = retrain(&splits, &out.result.selected_indices, &small_config(1)).unwrap();
    assert_eq!(again.model.to_text(), out.reference.model.to_text());
}

#[test]
fn selection_rejects_out_of_range_k() {
    let splits = small_splits(2);
    assert!(run_selection(&splits, &small_config(2), 0).is_err());
    assert!(run_selection(&splits, &small_config(2), 9).is_err());
    assert!(selection_curve(&splits, &small_config(2), &[], 0.1).is_err());
    assert!(selection_curve(&splits, &small_config(2), &[3, 9], 0.1).is_err());
}

#[test]
fn result_fields_follow_the_ranking() {
    let splits = small_splits(3);
    let out = run_selection(&splits, &small_config(3), 3).unwrap();
    let top = select_top_k(&out.surrogate.report, 3).unwrap();
    assert_eq!(out.result.selected_indices, top);
    assert_eq!(out.result.k, 3);
    assert_eq!(out.result.ratio_percent(), "37.50%");
    let mut sorted = top.clone();
    sorted.sort_unstable();
    assert_eq!(out.retrained.fields, sorted);
    let names = splits.train.field_names();
    let expected: Vec<String> = top.iter().map(|&i| names[i].clone()).collect();
    assert_eq!(out.result.selected, expected);
    let csv = out.result.to_csv();
    assert!(csv.starts_with("k,n_fields,ratio,ratio_percent,auc,"));
    assert!(csv.lines().nth(1).unwrap().ends_with(&expected.join(";")));
}

#[test]
fn retrained_model_ignores_unselected_columns() {
    let splits = small_splits(4);
    let keep = [1, 3, 5];
    let r = retrain(&splits, &keep, &small_config(4)).unwrap();
    let before = predict_dataset(&r.model, &splits.test.select_fields(&keep).unwrap()).unwrap();
    let mut shuffled = splits.test.clone();
    let n = shuffled.len();
    let f = shuffled.n_fields();
    for col in [0, 2, 7] {
        let column: Vec<usize> = (0..n).map(|row| shuffled.indices[row * f + col]).collect();
        for row in 0..n {
            shuffled.indices[row * f + col] = column[(row * 7 + 3) % n];
        }
    }
    assert_ne!(shuffled.indices, splits.test.indices);
    let after = predict_dataset(&r.model, &shuffled.select_fields(&keep).unwrap()).unwrap();
    assert_eq!(
        before.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
        after.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn curve_delta_edge_cases() {
    let splits = small_splits(5);
    let cfg = small_config(5);
    let (loose, _) = selection_curve(&splits, &cfg, &[6, 2, 4, 8], 1.0).unwrap();
    assert_eq!(loose.minimal_k, Some(2));
    let ks: Vec<usize> = loose.points.iter().map(|p| p.k).collect();
    assert_eq!(ks, vec![2, 4, 6, 8]);

    let (strict, _) = selection_curve(&splits, &cfg, &[2, 8], 0.0).unwrap();
    let full = strict.points.last().unwrap();
    assert_eq!(full.auc, strict.reference_auc);
    assert!(strict.minimal_k.is_some_and(|k| k <= 8));
    assert!(strict.to_csv().lines().last().unwrap().ends_with(",0.0,1"));
    assert_eq!(strict.to_jsonl().unwrap().lines().count(), 3);
}

#[test]
fn curve_reuses_one_surrogate_ranking() {
    let splits = small_splits(6);
    let cfg = small_config(6);
    let (curve, surrogate) = selection_curve(&splits, &cfg, &[2, 5], 1.0).unwrap();
    let single = run_selection(&splits, &cfg, 5).unwrap();
    assert_eq!(surrogate.report.scores, single.surrogate.report.scores);
    assert_eq!(curve.points[1].auc, single.result.auc);
}

#[test]
fn planted_curve_reaches_reference_with_few_fields() {
    let planted = vec![1, 4, 7, 10, 13, 16];
    let ks: Vec<usize> = (1..=10).map(|i| 2 * i).collect();
    for s in 0..5u64 {
        let splits = planted_splits(&planted_spec(50_000, 20, planted.clone(), 0.3, 700 + s));
        let mut cfg = SelectionConfig {
            seed: s,
            ..SelectionConfig::default()
        };
        cfg.train.importance = ImportanceConfig {
            lambda: 0.01,
            ..ImportanceConfig::default()
        };
        let (curve, _) = selection_curve(&splits, &cfg, &ks, 0.005).unwrap();
        let k = curve.minimal_k.expect("K = F always qualifies");
        assert!(k <= 8, "seed {s}: minimal K {k}\n{}", curve.to_csv());
    }
}

#[test]
fn ranking_is_deterministic_across_runs() {
    let splits = small_splits(7);
    let a = run_selection(&splits, &small_config(7), 4).unwrap();
    let b = run_selection(&splits, &small_config(7), 4).unwrap();
    let text = |r: &ImportanceReport| (r.to_csv(), r.to_jsonl().unwrap());
    assert_eq!(text(&a.surrogate.report), text(&b.surrogate.report));
    assert_eq!(a.result.to_jsonl().unwrap(), b.result.to_jsonl().unwrap());
    assert_eq!(a.retrained.model.to_text(), b.retrained.model.to_text());
}
