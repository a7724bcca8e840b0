//! Deterministic demonstrations of three estimator biases.
//!
//! * approximation: one-point gradient-times-displacement against the
//!   anchor-averaged estimate on `L(x) = x^2 + 3`,
//! * baseline: how far each baseline kind sits from the decision boundary
//!   of a model trained on imbalanced data,
//! * layer: gate magnitudes against loss-based importance when a gated
//!   signal feeds a dead downstream path.

use serde::Serialize;

use crate::autodiff::{forward_backward, DenseMatrix, Differentiable, EmbeddingBlock};
use crate::baselines::{
    baseline_logit_audit, smoothing_baseline, BaselineContext, BaselineKind, DatasetEmbeddingStats,
    ProjectionConfig,
};
use crate::data::{generate_synthetic, split_dataset, Provenance, SyntheticSpec, TabularDataset};
use crate::error::{Error, Result};
use crate::importance::{
    exact_per_sample, exact_report, field_importance, importance_vectors, kendall_tau,
    GradientLocation, ImportanceConfig, ScoreMode,
};
use crate::model::{Arch, CtrModel, DenseLayer, Field, FieldSchema};
use crate::pipeline::ModelConfig;
use crate::seed;
use crate::trainer::{train, Adam, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoRecord {
    pub record: String,
    pub values: Vec<(String, f64)>,
}

impl DemoRecord {
    fn new(record: &str, values: &[(&str, f64)]) -> Self {
        Self {
            record: record.to_string(),
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasDemoReport {
    pub demo: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub records: Vec<DemoRecord>,
}

impl BiasDemoReport {
    pub fn record(&self, name: &str) -> Option<&DemoRecord> {
        self.records.iter().find(|r| r.record == name)
    }

    pub fn value(&self, record: &str, column: &str) -> Option<f64> {
        self.record(record)?
            .values
            .iter()
            .find(|(k, _)| k == column)
            .map(|(_, v)| *v)
    }

    /// Long format: `record,column,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("record,column,value\n");
        for r in &self.records {
            for (k, v) in &r.values {
                s.push_str(&format!("{},{},{:?}\n", r.record, k, v));
            }
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&serde_json::json!({
            "demo": self.demo,
            "seed": self.seed,
            "config": self.config,
        }))?;
        s.push('\n');
        for r in &self.records {
            let values: serde_json::Map<String, serde_json::Value> = r
                .values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::json!(v)))
                .collect();
            s.push_str(&serde_json::to_string(&serde_json::json!({
                "record": r.record,
                "values": values,
            }))?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// A scalar loss of a scalar input with a known derivative.
pub trait ScalarMap {
    fn value(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
}

/// `x^2 + c`.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedSquare(pub f64);

impl ScalarMap for ShiftedSquare {
    fn value(&self, x: f64) -> f64 {
        x * x + self.0
    }

    fn derivative(&self, x: f64) -> f64 {
        2.0 * x
    }
}

/// Presents a [`ScalarMap`] as a one-field, one-dim model whose per-sample
/// loss is the map itself, so the importance estimators run on it unchanged.
pub struct AnalyticLoss<M>(pub M);

impl<M: ScalarMap> Differentiable for AnalyticLoss<M> {
    fn n_fields(&self) -> usize {
        1
    }

    fn embed_dim(&self) -> usize {
        1
    }

    fn logits(&self, block: &EmbeddingBlock) -> Result<Vec<f64>> {
        self.check_block(block)?;
        Ok(block.data().to_vec())
    }

    fn input_vjp(
        &self,
        block: &EmbeddingBlock,
        cotangent: &mut dyn FnMut(usize, f64) -> f64,
    ) -> Result<(Vec<f64>, EmbeddingBlock)> {
        self.check_block(block)?;
        let g = block
            .data()
            .iter()
            .enumerate()
            .map(|(s, &x)| cotangent(s, x))
            .collect();
        Ok((block.data().to_vec(), EmbeddingBlock::from_vec(block.samples(), 1, 1, g)?))
    }

    fn per_sample_loss_grads(
        &self,
        block: &EmbeddingBlock,
        _labels: &[u8],
    ) -> Result<(Vec<f64>, EmbeddingBlock)> {
        self.check_block(block)?;
        let l = block.data().iter().map(|&x| self.0.value(x)).collect();
        let g = block.data().iter().map(|&x| self.0.derivative(x)).collect();
        Ok((l, EmbeddingBlock::from_vec(block.samples(), 1, 1, g)?))
    }

    fn per_sample_losses(&self, block: &EmbeddingBlock, _labels: &[u8]) -> Result<Vec<f64>> {
        self.check_block(block)?;
        Ok(block.data().iter().map(|&x| self.0.value(x)).collect())
    }
}

pub const APPROX_STEPS: [usize; 4] = [1, 2, 4, 8];

/// Estimates of the loss change of `x^2 + 3` when `x = 2` is replaced by 0.
pub fn demo_approximation() -> Result<BiasDemoReport> {
    let model = AnalyticLoss(ShiftedSquare(3.0));
    let x = EmbeddingBlock::from_vec(1, 1, 1, vec![2.0])?;
    let zero = EmbeddingBlock::zeros(1, 1, 1);
    let labels = [0u8];

    let exact = exact_per_sample(&model, &x, &labels, &zero, 0)?[0];
    let row = |name: &str, estimate: f64| {
        DemoRecord::new(name, &[("estimate", estimate), ("abs_error", (estimate - exact).abs())])
    };
    let mut records = vec![row("exact", exact)];
    let one_point = importance_vectors(&model, &x, &labels, &zero, 0, GradientLocation::Input)?;
    records.push(row("one_point_input", one_point.vectors.data()[0]));
    let (_, raw) = model.per_sample_loss_grads(&x, &labels)?;
    records.push(row("raw_gradient", raw.data()[0]));
    for steps in APPROX_STEPS {
        let iv = importance_vectors(&model, &x, &labels, &zero, steps, GradientLocation::Input)?;
        records.push(row(&format!("aggregated_steps_{steps}"), iv.vectors.data()[0]));
    }
    Ok(BiasDemoReport {
        demo: "approx".into(),
        seed: None,
        config: serde_json::json!({
            "loss": "x^2 + 3",
            "input": 2.0,
            "baseline": 0.0,
            "steps": APPROX_STEPS,
        }),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineBiasSettings {
    pub n_rows: usize,
    pub n_fields: usize,
    pub planted: Vec<usize>,
    pub vocab_size: usize,
    pub positive_rate: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub projection: ProjectionConfig,
}

impl Default for BaselineBiasSettings {
    fn default() -> Self {
        Self {
            n_rows: 20_000,
            n_fields: 10,
            planted: vec![0, 1, 2, 3],
            vocab_size: 20,
            positive_rate: 0.10,
            model: ModelConfig::default(),
            train: TrainConfig {
                max_epochs: 10,
                ..TrainConfig::default()
            },
            projection: ProjectionConfig::default(),
        }
    }
}

/// Trains an MLP on imbalanced planted data and audits every baseline kind
/// on the validation split.
pub fn demo_baseline_bias(seed: u64) -> Result<BiasDemoReport> {
    demo_baseline_bias_with(seed, &BaselineBiasSettings::default())
}

pub fn demo_baseline_bias_with(seed: u64, settings: &BaselineBiasSettings) -> Result<BiasDemoReport> {
    let spec = SyntheticSpec {
        n_rows: settings.n_rows,
        n_fields: settings.n_fields,
        planted: settings.planted.clone(),
        vocab_size: settings.vocab_size,
        target_positive_rate: settings.positive_rate,
        interaction_pairs: vec![],
        seed: seed::derive(seed, "baseline-demo-data", 0),
    };
    let splits = split_dataset(&generate_synthetic(&spec)?, seed)?;
    let init = CtrModel::new(
        splits.train.schema(settings.model.embed_dim)?,
        settings.model.arch,
        &settings.model.hidden_dims,
        seed::derive(seed, "baseline-demo-init", 0),
    )?;
    let mut tc = settings.train.clone();
    tc.seed = seed::derive(seed, "baseline-demo-train", 0);
    let (model, _) = train(&init, &splits.train, &splits.validation, &tc)?;
    let stats = DatasetEmbeddingStats::from_dataset(&model, &splits.train)?;
    let mut rng = seed::rng(seed, "baseline-demo-audit", 0);
    let mut ctx = BaselineContext::new()
        .with_stats(&stats)
        .with_rng(&mut rng)
        .with_projection(settings.projection);
    let d_b = ctx.boundary_logit()?;
    let rows = baseline_logit_audit(&model, &splits.validation, &BaselineKind::ALL, &mut ctx)?;
    let records = rows
        .iter()
        .map(|r| {
            DemoRecord::new(
                r.kind.as_str(),
                &[
                    ("mean_logit_distance", r.mean_logit_distance),
                    ("mean_embedding_distance", r.mean_embedding_distance),
                    ("mean_probability", r.mean_probability),
                ],
            )
        })
        .collect();
    Ok(BiasDemoReport {
        demo: "baseline".into(),
        seed: Some(seed),
        config: serde_json::json!({
            "settings": settings,
            "decision_boundary": d_b,
            "train_positive_rate": splits.train.positive_rate(),
        }),
        records,
    })
}

/// Field embedding values of the hand-built layer-bias model.
const HAND_A: [f64; 3] = [0.0, 0.5, 1.0];
const HAND_B: [f64; 3] = [0.0, 0.4, 0.9];
pub const HAND_GATES: [f64; 2] = [2.0, 0.5];

/// Two fields of dimension 1. Each passes through its own gate (a diagonal
/// first layer, so signals do not mix), then a ReLU, then a head that
/// weights A by 0 and B by 10.
pub fn hand_built_gate_model() -> Result<(CtrModel, TabularDataset)> {
    let schema = FieldSchema::new(vec![("A".into(), 3), ("B".into(), 3)], 1)?;
    let mut model = CtrModel::new(schema, Arch::Mlp, &[2], 0)?;
    model.embeddings[0] = DenseMatrix::from_vec(3, 1, HAND_A.to_vec())?;
    model.embeddings[1] = DenseMatrix::from_vec(3, 1, HAND_B.to_vec())?;
    model.layers[0] = DenseLayer {
        weight: DenseMatrix::from_vec(2, 2, vec![HAND_GATES[0], 0.0, 0.0, HAND_GATES[1]])?,
        bias: DenseMatrix::zeros(2, 1),
    };
    model.head = Some(DenseMatrix::from_vec(1, 2, vec![0.0, 10.0])?);
    model.bias = DenseMatrix::from_vec(1, 1, vec![-2.5])?;
    model.check_invariants()?;

    let mut indices = Vec::new();
    let mut labels = Vec::new();
    for a in 0..3 {
        for b in 0..3 {
            indices.extend([a, b]);
            labels.push(u8::from(b == 2));
        }
    }
    let fields = model.schema.fields.clone();
    let ds = TabularDataset::new(
        fields,
        indices,
        labels,
        Provenance {
            source: "hand-built layer-bias probe".into(),
            seed: None,
            planted: Some(vec![1]),
        },
    )?;
    Ok((model, ds))
}

/// Multiplicative per-field gates in front of a CTR model.
#[derive(Debug, Clone)]
pub struct GatedModel {
    pub inner: CtrModel,
    pub gates: DenseMatrix,
}

impl GatedModel {
    fn gate(&self, block: &EmbeddingBlock) -> EmbeddingBlock {
        let mut out = block.clone();
        for s in 0..block.samples() {
            for f in 0..block.fields() {
                let g = self.gates.get(0, f);
                out.field_mut(s, f).iter_mut().for_each(|v| *v *= g);
            }
        }
        out
    }
}

impl Differentiable for GatedModel {
    fn n_fields(&self) -> usize {
        self.inner.n_fields()
    }

    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    fn logits(&self, block: &EmbeddingBlock) -> Result<Vec<f64>> {
        self.inner.logits(&self.gate(block))
    }

    fn input_vjp(
        &self,
        block: &EmbeddingBlock,
        cotangent: &mut dyn FnMut(usize, f64) -> f64,
    ) -> Result<(Vec<f64>, EmbeddingBlock)> {
        let (z, g) = self.inner.input_vjp(&self.gate(block), cotangent)?;
        Ok((z, self.gate(&g)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateTrainSettings {
    pub spec: SyntheticSpec,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l1: f64,
    pub steps: usize,
}

impl GateTrainSettings {
    pub fn new(seed: u64) -> Self {
        Self {
            spec: SyntheticSpec {
                n_rows: 10_000,
                n_fields: 8,
                planted: vec![0, 1, 2],
                vocab_size: 20,
                target_positive_rate: 0.3,
                interaction_pairs: vec![],
                seed: seed::derive(seed, "layer-demo-data", 0),
            },
            model: ModelConfig::default(),
            epochs: 5,
            batch_size: 256,
            learning_rate: 5e-3,
            l1: 1e-3,
            steps: 10,
        }
    }
}

fn train_gated(settings: &GateTrainSettings, train_set: &TabularDataset, seed_v: u64) -> Result<GatedModel> {
    use rand::seq::SliceRandom;
    let inner = CtrModel::new(
        train_set.schema(settings.model.embed_dim)?,
        settings.model.arch,
        &settings.model.hidden_dims,
        seed::derive(seed_v, "layer-demo-init", 0),
    )?;
    let f = train_set.n_fields();
    let mut gm = GatedModel {
        inner,
        gates: DenseMatrix::from_vec(1, f, vec![1.0; f])?,
    };
    let mut shapes: Vec<(usize, usize)> = gm.inner.all_params_mut().iter().map(|p| p.shape()).collect();
    shapes.push((1, f));
    let mut adam = Adam::new(&shapes, settings.learning_rate, 0.9, 0.999, 1e-8);
    let d = gm.inner.schema.embed_dim;
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(seed_v, "layer-demo-shuffle", epoch as u64));
        for rows in order.chunks(settings.batch_size) {
            let idx: Vec<usize> = rows.iter().flat_map(|&r| train_set.row(r).iter().copied()).collect();
            let labels: Vec<u8> = rows.iter().map(|&r| train_set.labels[r]).collect();
            let raw = gm.inner.embed(&idx)?;
            let gated = gm.gate(&raw);
            let bundle = forward_backward(&gm.inner, &gated, &labels, true)?;
            let dg = bundle.input_grads.expect("requested");
            let mut gate_grad = DenseMatrix::zeros(1, f);
            for k in 0..f {
                let mut acc = 0.0;
                for s in 0..raw.samples() {
                    acc += crate::autodiff::dot(dg.field(s, k), raw.field(s, k));
                }
                let g = gm.gates.get(0, k);
                gate_grad.set(0, k, acc + settings.l1 * g.signum());
            }
            let mut grads: Vec<DenseMatrix> = gm
                .inner
                .embeddings
                .iter()
                .map(|t| DenseMatrix::zeros(t.rows(), d))
                .collect();
            for (s, row) in idx.chunks(f).enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    let g = gm.gates.get(0, k);
                    for (acc, &x) in grads[k].row_mut(v).iter_mut().zip(dg.field(s, k)) {
                        *acc += g * x;
                    }
                }
            }
            grads.extend(bundle.param_grads);
            grads.push(gate_grad);
            let mut params = gm.inner.all_params_mut();
            let mut gates = std::mem::replace(&mut gm.gates, DenseMatrix::zeros(0, 0));
            params.push(&mut gates);
            adam.update(&mut params, &grads);
            gm.gates = gates;
        }
    }
    Ok(gm)
}

/// Per-field abs-aggregated exact and path-aggregated scores of a gated
/// model, with the smoothing baseline taken on the raw embeddings.
fn gated_scores(gm: &GatedModel, ds: &TabularDataset, steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = ds.n_fields();
    let mut exact = vec![0.0; f];
    let mut agg = vec![0.0; f];
    for (chunk, labels) in ds.indices.chunks(1024 * f).zip(ds.labels.chunks(1024)) {
        let block = gm.inner.embed(chunk)?;
        let base = smoothing_baseline(&block);
        for (k, e) in exact.iter_mut().enumerate() {
            *e += exact_per_sample(gm, &block, labels, &base, k)?
                .iter()
                .map(|v| v.abs())
                .sum::<f64>();
        }
        let iv = importance_vectors(gm, &block, labels, &base, steps, GradientLocation::Input)?;
        for s in 0..block.samples() {
            for (k, a) in agg.iter_mut().enumerate() {
                *a += ScoreMode::AbsSum.scalarize(iv.vectors.field(s, k));
            }
        }
    }
    Ok((exact, agg))
}

fn field_record(name: &str, fields: &[Field], values: &[f64]) -> DemoRecord {
    DemoRecord {
        record: name.to_string(),
        values: fields
            .iter()
            .zip(values)
            .map(|(f, &v)| (f.name.clone(), v))
            .collect(),
    }
}

/// Hand-built verdicts plus a trained-gates variant on planted data.
pub fn demo_layer_bias(seed: u64) -> Result<BiasDemoReport> {
    demo_layer_bias_with(seed, &GateTrainSettings::new(seed))
}

pub fn demo_layer_bias_with(seed: u64, settings: &GateTrainSettings) -> Result<BiasDemoReport> {
    let (model, ds) = hand_built_gate_model()?;
    let cfg = ImportanceConfig {
        baseline: BaselineKind::Smoothing,
        score_mode: ScoreMode::AbsSum,
        steps_val: settings.steps,
        ..ImportanceConfig::default()
    };
    let exact = exact_report(&model, &ds, &cfg, None)?;
    let agg = field_importance(&model, &ds, &cfg, None)?;
    let gates = HAND_GATES.to_vec();
    let flag = |b: bool| f64::from(u8::from(b));
    let mut records = vec![
        field_record("hand.gate", &ds.fields, &gates),
        field_record("hand.exact", &ds.fields, &exact.scores),
        field_record("hand.aggregated", &ds.fields, &agg.scores),
        DemoRecord::new(
            "hand.verdict",
            &[
                ("gate_ranks_a_over_b", flag(gates[0] > gates[1])),
                ("exact_ranks_b_over_a", flag(exact.scores[1] > exact.scores[0])),
                ("aggregated_ranks_b_over_a", flag(agg.scores[1] > agg.scores[0])),
                ("exact_a_is_zero", flag(exact.scores[0] == 0.0)),
                ("aggregated_a_is_zero", flag(agg.scores[0] == 0.0)),
            ],
        ),
    ];

    let data = generate_synthetic(&settings.spec)?;
    let splits = split_dataset(&data, seed)?;
    let gm = train_gated(settings, &splits.train, seed)?;
    let (t_exact, t_agg) = gated_scores(&gm, &splits.validation, settings.steps)?;
    let gate_mag: Vec<f64> = gm.gates.data().iter().map(|g| g.abs()).collect();
    records.push(field_record("trained.gate", &splits.train.fields, &gate_mag));
    records.push(field_record("trained.exact", &splits.train.fields, &t_exact));
    records.push(field_record("trained.aggregated", &splits.train.fields, &t_agg));
    records.push(DemoRecord::new(
        "trained.tau",
        &[
            ("gate_vs_exact", kendall_tau(&gate_mag, &t_exact)),
            ("aggregated_vs_exact", kendall_tau(&t_agg, &t_exact)),
        ],
    ));

    if records.iter().any(|r| r.values.iter().any(|(_, v)| !v.is_finite())) {
        return Err(Error::NonFinite {
            layer: "layer-bias report".into(),
        });
    }
    Ok(BiasDemoReport {
        demo: "layer".into(),
        seed: Some(seed),
        config: serde_json::json!({
            "hand_gates": HAND_GATES,
            "hand_head": [0.0, 10.0],
            "trained": settings,
        }),
        records,
    })
}
