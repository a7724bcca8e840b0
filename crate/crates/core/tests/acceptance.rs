//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line. Criteria run one after another so
//! their timings are not inflated. Pass criterion numbers as arguments to
//! run a subset.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;

use fieldsel_core::autodiff::{
    finite_difference_gradients, forward_backward, relative_error, DenseMatrix, Differentiable,
    EmbeddingBlock,
};
use fieldsel_core::baselines::{smoothing_baseline, swap_baseline, BaselineKind};
use fieldsel_core::biaslab::{demo_approximation, demo_baseline_bias, demo_layer_bias, APPROX_STEPS};
use fieldsel_core::importance::{
    exact_importance_with, exact_report, field_importance, importance_vectors, kendall_tau,
    GradientLocation, ImportanceConfig, ScoreMode,
};
use fieldsel_core::model::{Arch, CtrModel, FieldSchema};
use fieldsel_core::pipeline::{fit_surrogate, run_selection, select_top_k, SelectionConfig};
use fieldsel_core::seed;
use fieldsel_core::trainer::TrainConfig;

use common::{head_block, planted_spec, planted_splits, trained};

const FD_CONFIGS: usize = 100;
const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-4;
/// Entries whose gradient magnitude is below this are compared in absolute
/// terms, since central differences carry ~1e-10 rounding noise.
const FD_ABS_FLOOR: f64 = 1e-6;
const APPROX_TOL: f64 = 1e-9;
const COMPLETENESS_REL_TOL: f64 = 0.02;
const COMPLETENESS_SHARE: f64 = 0.95;
const COMPLETENESS_MIN_DELTA: f64 = 1e-4;
const RECALL_THRESHOLD: f64 = 5.0 / 6.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed <= limit
}

/// Pre-activations of every hidden unit for each sample.
fn hidden_preactivations(model: &CtrModel, block: &EmbeddingBlock) -> Vec<f64> {
    let mut out = Vec::new();
    if model.layers.is_empty() {
        return out;
    }
    for s in 0..block.samples() {
        let mut h: Vec<f64> = block.sample(s).to_vec();
        for layer in &model.layers {
            let w = &layer.weight;
            let z: Vec<f64> = (0..w.rows())
                .map(|r| w.row(r).iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + layer.bias.get(r, 0))
                .collect();
            out.extend(&z);
            h = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let archs = [Arch::Linear, Arch::Fm, Arch::Mlp, Arch::FmMlp];
    let mut rng = seed::rng(1, "acceptance-fd", 0);
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut skipped = 0;
    while done < FD_CONFIGS {
        let arch = archs[done % archs.len()];
        let fields = rng.random_range(1..=5);
        let dim = rng.random_range(1..=4);
        let batch = rng.random_range(1..=4);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=6)).collect();
        let schema = FieldSchema::new((0..fields).map(|f| (format!("f{f}"), 3)).collect(), dim).unwrap();
        let mut model = CtrModel::new(schema, arch, &hidden, rng.random()).unwrap();
        for layer in &mut model.layers {
            layer.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        model.bias = DenseMatrix::from_vec(1, 1, vec![rng.random_range(-1.0..1.0)]).unwrap();
        let data = (0..batch * fields * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let block = EmbeddingBlock::from_vec(batch, fields, dim, data).unwrap();
        if hidden_preactivations(&model, &block).iter().any(|z| z.abs() < 1e-3) {
            skipped += 1;
            continue;
        }
        let labels: Vec<u8> = (0..batch).map(|_| rng.random_range(0..2)).collect();
        let analytic = forward_backward(&model, &block, &labels, true).unwrap();
        let numeric = finite_difference_gradients(&model, &block, &labels, FD_STEP).unwrap();
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for (a, n) in analytic.param_grads.iter().zip(&numeric.param_grads) {
            pairs.extend(a.data().iter().copied().zip(n.data().iter().copied()));
        }
        let (ai, ni) = (analytic.input_grads.unwrap(), numeric.input_grads.unwrap());
        pairs.extend(ai.data().iter().copied().zip(ni.data().iter().copied()));
        for (a, n) in pairs {
            let err = if a.abs().max(n.abs()) < FD_ABS_FLOOR {
                (a - n).abs() / FD_ABS_FLOOR
            } else {
                relative_error(a, n)
            };
            worst = worst.max(err);
        }
        done += 1;
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: worst <= FD_REL_TOL && within(elapsed, Duration::from_secs(60)),
        detail: format!(
            "{FD_CONFIGS} configs ({skipped} near-kink draws redrawn), max relative error {worst:.2e} (tol {FD_REL_TOL:.0e}), {:.2}s",
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let r = demo_approximation().unwrap();
    let again = demo_approximation().unwrap();
    let elapsed = start.elapsed();
    let exact = r.value("exact", "estimate").unwrap();
    let one = r.value("one_point_input", "estimate").unwrap();
    let err = r.value("one_point_input", "abs_error").unwrap();
    let aggregated_ok = APPROX_STEPS.iter().all(|s| {
        (r.value(&format!("aggregated_steps_{s}"), "estimate").unwrap() - 4.0).abs() <= APPROX_TOL
    });
    Outcome {
        pass: exact == 4.0 && one == 8.0 && err == 4.0 && aggregated_ok && r == again
            && within(elapsed, Duration::from_secs(1)),
        detail: format!(
            "exact {exact}, one-point {one} (error {err}), aggregated steps {APPROX_STEPS:?} within {APPROX_TOL:.0e} of 4: {aggregated_ok}, {:.3}s",
            elapsed.as_secs_f64()
        ),
    }
}

/// Per-sample `|sum_f signed score - dL| / |dL|` under the smoothing baseline.
fn completeness_residuals(model: &CtrModel, block: &EmbeddingBlock, labels: &[u8], steps: usize) -> Vec<(f64, f64)> {
    let base = smoothing_baseline(block);
    let iv = importance_vectors(model, block, labels, &base, steps, GradientLocation::Input).unwrap();
    let scores = iv.scores(ScoreMode::SignedSum);
    let l_e = model.per_sample_losses(block, labels).unwrap();
    let l_b = model.per_sample_losses(&base, labels).unwrap();
    (0..block.samples())
        .map(|s| {
            let delta = l_e[s] - l_b[s];
            let total: f64 = scores.sample(s).iter().sum();
            ((total - delta).abs(), delta)
        })
        .collect()
}

fn completeness_model(seed_v: u64) -> (CtrModel, fieldsel_core::data::Splits) {
    let spec = planted_spec(20_000, 20, vec![0, 3, 6, 9, 12, 15], 0.3, seed_v);
    let splits = planted_splits(&spec);
    let model = trained(&splits, Arch::Mlp, 8, &[16, 16], 5, seed_v);
    (model, splits)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let (model, splits) = completeness_model(3);
    let (block, labels) = head_block(&model, &splits.validation, 1000);
    let res = completeness_residuals(&model, &block, &labels, 256);
    let kept: Vec<f64> = res
        .iter()
        .filter(|(_, d)| d.abs() >= COMPLETENESS_MIN_DELTA)
        .map(|(r, d)| r / d.abs())
        .collect();
    let ok = kept.iter().filter(|&&r| r <= COMPLETENESS_REL_TOL).count();
    let share = ok as f64 / kept.len() as f64;
    let elapsed = start.elapsed();
    Outcome {
        pass: share >= COMPLETENESS_SHARE && within(elapsed, Duration::from_secs(120)),
        detail: format!(
            "{ok}/{} samples within {:.0}% ({:.1}%, need {:.0}%), {} excluded for |dL| < {COMPLETENESS_MIN_DELTA:.0e}, {:.1}s",
            kept.len(),
            COMPLETENESS_REL_TOL * 100.0,
            share * 100.0,
            COMPLETENESS_SHARE * 100.0,
            res.len() - kept.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_4() -> Outcome {
    let mut lines = Vec::new();
    let (mut r4_total, mut r64_total) = (0.0, 0.0);
    for s in [41, 42, 43] {
        let (model, splits) = completeness_model(s);
        let (block, labels) = head_block(&model, &splits.validation, 250);
        let mean = |steps| {
            let r = completeness_residuals(&model, &block, &labels, steps);
            r.iter().map(|(v, _)| v).sum::<f64>() / r.len() as f64
        };
        let (r4, r64) = (mean(4), mean(64));
        r4_total += r4;
        r64_total += r64;
        lines.push(format!("seed {s}: {r4:.2e} -> {r64:.2e}"));
    }
    Outcome {
        pass: r64_total <= r4_total,
        detail: format!(
            "mean |residual| steps 4 vs 64 over 3 seeds x 250 samples: {:.2e} -> {:.2e} ({})",
            r4_total / 3.0,
            r64_total / 3.0,
            lines.join("; ")
        ),
    }
}

fn recall_config(seed_v: u64) -> SelectionConfig {
    let mut train = TrainConfig::default();
    train.importance = ImportanceConfig {
        baseline: BaselineKind::Smoothing,
        score_mode: ScoreMode::AbsSum,
        lambda: 0.01,
        steps_val: 10,
        ..ImportanceConfig::default()
    };
    SelectionConfig {
        train,
        seed: seed_v,
        ..SelectionConfig::default()
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let planted = vec![1, 4, 7, 10, 13, 16];
    let mut recalls = Vec::new();
    for s in 0..5u64 {
        let spec = planted_spec(50_000, 20, planted.clone(), 0.3, 500 + s);
        let splits = planted_splits(&spec);
        let sur = fit_surrogate(&splits, &recall_config(s)).unwrap();
        let top = select_top_k(&sur.report, planted.len()).unwrap();
        let hits = top.iter().filter(|f| planted.contains(f)).count();
        recalls.push(hits as f64 / planted.len() as f64);
    }
    let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let elapsed = start.elapsed();
    Outcome {
        pass: mean >= RECALL_THRESHOLD - 1e-12 && within(elapsed, Duration::from_secs(300)),
        detail: format!(
            "top-6 recall per seed {:?}, mean {mean:.3} (need >= {RECALL_THRESHOLD:.3}), {:.1}s",
            recalls.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_6() -> Outcome {
    let spec = planted_spec(20_000, 20, vec![0, 3, 6, 9, 12, 15], 0.3, 6);
    let splits = planted_splits(&spec);
    let model = trained(&splits, Arch::Linear, 8, &[], 10, 6);
    let cfg = ImportanceConfig {
        steps_val: 8,
        ..ImportanceConfig::default()
    };
    let agg = field_importance(&model, &splits.validation, &cfg, None).unwrap();
    let exact = exact_report(&model, &splits.validation, &cfg, None).unwrap();
    let tau = kendall_tau(&agg.scores, &exact.scores);
    Outcome {
        pass: tau == 1.0,
        detail: format!(
            "Kendall tau {tau} between aggregated (steps 8) and exact rankings over {} fields",
            agg.scores.len()
        ),
    }
}

fn criterion_7() -> Outcome {
    let spec = planted_spec(2_000, 8, vec![0, 1, 2], 0.3, 7);
    let splits = planted_splits(&spec);
    let model = trained(&splits, Arch::Mlp, 4, &[8], 3, 7);
    let mut values = Vec::new();
    for f in 0..splits.validation.n_fields() {
        let v = exact_importance_with(&model, &splits.validation, f, 64, &mut |block, _| {
            let identity: Vec<Vec<usize>> = (0..block.fields()).map(|_| (0..block.samples()).collect()).collect();
            swap_baseline(block, &identity)
        })
        .unwrap();
        values.push(v);
    }
    Outcome {
        pass: values.iter().all(|&v| v == 0.0),
        detail: format!("identity-permutation loss differences {values:?}"),
    }
}

fn criterion_8() -> Outcome {
    let a = demo_layer_bias(8).unwrap();
    let b = demo_layer_bias(8).unwrap();
    let v = |c: &str| a.value("hand.verdict", c).unwrap() == 1.0;
    let pass = v("gate_ranks_a_over_b")
        && v("exact_ranks_b_over_a")
        && v("aggregated_ranks_b_over_a")
        && v("exact_a_is_zero")
        && v("aggregated_a_is_zero")
        && a == b;
    Outcome {
        pass,
        detail: format!(
            "gates A {} B {}, exact A {} B {:.4}, aggregated A {} B {:.4}, deterministic {}",
            a.value("hand.gate", "A").unwrap(),
            a.value("hand.gate", "B").unwrap(),
            a.value("hand.exact", "A").unwrap(),
            a.value("hand.exact", "B").unwrap(),
            a.value("hand.aggregated", "A").unwrap(),
            a.value("hand.aggregated", "B").unwrap(),
            a == b
        ),
    }
}

fn criterion_9() -> Outcome {
    let tol = fieldsel_core::baselines::ProjectionConfig::default().tol;
    let mut closer = 0;
    let mut projection_ok = true;
    let mut lines = Vec::new();
    for s in 0..5u64 {
        let r = demo_baseline_bias(900 + s).unwrap();
        let smooth = r.value("smoothing", "mean_logit_distance").unwrap();
        let mean = r.value("mean", "mean_logit_distance").unwrap();
        let proj = r.value("boundary_projection", "mean_logit_distance").unwrap();
        closer += usize::from(smooth < mean);
        projection_ok &= proj <= tol;
        lines.push(format!("smoothing {smooth:.3} / mean {mean:.3} / projection {proj:.1e}"));
    }
    Outcome {
        pass: closer >= 3 && projection_ok,
        detail: format!(
            "smoothing closer in {closer}/5 seeds, projection within {tol:.0e}: {projection_ok} ({})",
            lines.join("; ")
        ),
    }
}

fn criterion_10() -> Outcome {
    let spec = planted_spec(5_000, 10, vec![0, 2, 4], 0.3, 10);
    let splits = planted_splits(&spec);
    let mut cfg = recall_config(10);
    cfg.train.max_epochs = 3;
    let artifacts = || {
        let o = run_selection(&splits, &cfg, 4).unwrap();
        vec![
            o.result.to_csv(),
            o.result.to_jsonl().unwrap(),
            o.surrogate.report.to_csv(),
            o.surrogate.report.to_jsonl().unwrap(),
            o.surrogate.history.to_csv(),
            o.surrogate.model.to_text(),
            o.retrained.model.to_text(),
            o.reference.model.to_text(),
        ]
    };
    let (a, b) = (artifacts(), artifacts());
    let same = a.iter().zip(&b).filter(|(x, y)| x.as_bytes() == y.as_bytes()).count();
    Outcome {
        pass: same == a.len(),
        detail: format!("{same}/{} report and model artifacts byte-identical", a.len()),
    }
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient oracle", criterion_1),
        (2, "approximation-bias reproduction", criterion_2),
        (3, "completeness", criterion_3),
        (4, "convergence decay", criterion_4),
        (5, "planted-feature recovery", criterion_5),
        (6, "oracle rank agreement", criterion_6),
        (7, "permutation identity", criterion_7),
        (8, "layer-bias verdict", criterion_8),
        (9, "baseline-bias audit", criterion_9),
        (10, "reproducibility", criterion_10),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected: Vec<_> = criteria
        .iter()
        .filter(|(n, _, _)| wanted.is_empty() || wanted.contains(n))
        .collect();
    let results: Vec<(usize, &str, Outcome)> = selected
        .iter()
        .map(|&&(n, name, f)| {
            let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Outcome {
                pass: false,
                detail: "panicked".into(),
            });
            (n, name, outcome)
        })
        .collect();
    let mut failed = 0;
    for (n, name, o) in &results {
        println!("{} criterion {n:>2} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
