//! Train, score, select top-K, retrain, report.
//!
//! One surrogate model is trained with the importance regularizer and
//! scored on the validation split. Selected subsets are retrained from
//! scratch and evaluated on the test split against a no-selection reference
//! trained with identical hyperparameters and seeds.

use serde::{Deserialize, Serialize};

use crate::baselines::DatasetEmbeddingStats;
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::importance::{csv_field, field_importance, ImportanceReport};
use crate::model::{Arch, CtrModel};
use crate::seed;
use crate::trainer::{evaluate, train, Metrics, TrainConfig, TrainHistory};

/// AUC or logloss differences at or above this are flagged as significant.
pub const SIGNIFICANCE: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            embed_dim: 8,
            hidden_dims: vec![16, 16],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub model: ModelConfig,
    /// Training settings; `train.importance` drives both the regularizer and
    /// validation scoring. `train.seed` is replaced by seeds derived from `seed`.
    pub train: TrainConfig,
    /// Overrides for the retrained models; default to the surrogate's.
    pub retrain_model: Option<ModelConfig>,
    pub retrain_train: Option<TrainConfig>,
    pub seed: u64,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(t) = &self.retrain_train {
            t.validate()?;
        }
        Ok(())
    }
}

/// Selected fields: the `k` highest scores, ties to the lower index,
/// returned in descending-score order.
pub fn select_top_k(report: &ImportanceReport, k: usize) -> Result<Vec<usize>> {
    let f = report.scores.len();
    if k == 0 || k > f {
        return Err(Error::InvalidArgument(format!("K = {k} outside 1..={f}")));
    }
    Ok(report.order().into_iter().take(k).collect())
}

/// Trained surrogate and its validation importance report.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub model: CtrModel,
    pub history: TrainHistory,
    pub report: ImportanceReport,
}

/// Trains the surrogate model alone, with the same seeds as [`fit_surrogate`].
pub fn train_surrogate(splits: &Splits, config: &SelectionConfig) -> Result<(CtrModel, TrainHistory)> {
    config.validate()?;
    let schema = splits.train.schema(config.model.embed_dim)?;
    let init = CtrModel::new(
        schema,
        config.model.arch,
        &config.model.hidden_dims,
        seed::derive(config.seed, "surrogate-init", 0),
    )?;
    train(&init, &splits.train, &splits.validation, &surrogate_train_config(config))
}

/// Training settings of the surrogate, with the derived seeds filled in.
pub fn surrogate_train_config(config: &SelectionConfig) -> TrainConfig {
    let mut tc = config.train.clone();
    tc.seed = seed::derive(config.seed, "surrogate-train", 0);
    tc.importance.seed = seed::derive(config.seed, "importance", 0);
    tc
}

pub fn fit_surrogate(splits: &Splits, config: &SelectionConfig) -> Result<Surrogate> {
    let (model, history) = train_surrogate(splits, config)?;
    let importance = surrogate_train_config(config).importance;
    let stats = if importance.baseline.needs_stats() {
        Some(DatasetEmbeddingStats::from_dataset(&model, &splits.train)?)
    } else {
        None
    };
    let report = field_importance(&model, &splits.validation, &importance, stats.as_ref())?;
    Ok(Surrogate {
        model,
        history,
        report,
    })
}

/// Fresh model on the `fields` columns, trained and evaluated on test.
#[derive(Debug, Clone)]
pub struct Retrained {
    /// Ascending column indices, the column order of `model`.
    pub fields: Vec<usize>,
    pub model: CtrModel,
    pub history: TrainHistory,
    pub metrics: Metrics,
}

pub fn retrain(splits: &Splits, fields: &[usize], config: &SelectionConfig) -> Result<Retrained> {
    let mc = config.retrain_model.as_ref().unwrap_or(&config.model);
    let mut tc = config.retrain_train.clone().unwrap_or_else(|| config.train.clone());
    tc.seed = seed::derive(config.seed, "retrain-train", 0);
    tc.importance.seed = seed::derive(config.seed, "retrain-importance", 0);
    let mut fields = fields.to_vec();
    fields.sort_unstable();
    fields.dedup();
    let train_set = splits.train.select_fields(&fields)?;
    let val_set = splits.validation.select_fields(&fields)?;
    let test_set = splits.test.select_fields(&fields)?;
    let init = CtrModel::new(
        train_set.schema(mc.embed_dim)?,
        mc.arch,
        &mc.hidden_dims,
        seed::derive(config.seed, "retrain-init", 0),
    )?;
    let (model, history) = train(&init, &train_set, &val_set, &tc)?;
    let metrics = evaluate(&model, &test_set)?;
    Ok(Retrained {
        fields,
        model,
        history,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<String>,
    pub selected_indices: Vec<usize>,
    pub k: usize,
    pub n_fields: usize,
    /// `k / n_fields`.
    pub ratio: f64,
    pub auc: f64,
    pub logloss: f64,
    pub reference_auc: f64,
    pub reference_logloss: f64,
    pub significant_auc_change: bool,
    pub significant_logloss_change: bool,
}

impl SelectionResult {
    fn new(names: &[String], selected: &[usize], retrained: &Retrained, reference: &Metrics) -> Self {
        let k = selected.len();
        let n = names.len();
        let m = retrained.metrics;
        Self {
            selected: selected.iter().map(|&i| names[i].clone()).collect(),
            selected_indices: selected.to_vec(),
            k,
            n_fields: n,
            ratio: k as f64 / n as f64,
            auc: m.auc,
            logloss: m.logloss,
            reference_auc: reference.auc,
            reference_logloss: reference.logloss,
            significant_auc_change: (m.auc - reference.auc).abs() >= SIGNIFICANCE,
            significant_logloss_change: (m.logloss - reference.logloss).abs() >= SIGNIFICANCE,
        }
    }

    /// Ratio as a percentage with two decimals, e.g. `30.77%`.
    pub fn ratio_percent(&self) -> String {
        format_ratio(self.k, self.n_fields)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "k,n_fields,ratio,ratio_percent,auc,logloss,reference_auc,reference_logloss,significant_auc_change,significant_logloss_change,selected\n",
        );
        s.push_str(&format!(
            "{},{},{:?},{},{:?},{:?},{:?},{:?},{},{},{}\n",
            self.k,
            self.n_fields,
            self.ratio,
            self.ratio_percent(),
            self.auc,
            self.logloss,
            self.reference_auc,
            self.reference_logloss,
            u8::from(self.significant_auc_change),
            u8::from(self.significant_logloss_change),
            csv_field(&self.selected.join(";"))
        ));
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}

pub fn format_ratio(k: usize, n: usize) -> String {
    format!("{:.2}%", 100.0 * k as f64 / n as f64)
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub result: SelectionResult,
    pub surrogate: Surrogate,
    pub retrained: Retrained,
    pub reference: Retrained,
}

/// Full select-and-retrain run for one `k`.
pub fn run_selection(splits: &Splits, config: &SelectionConfig, k: usize) -> Result<SelectionOutcome> {
    let f = splits.train.n_fields();
    if k == 0 || k > f {
        return Err(Error::InvalidArgument(format!("K = {k} outside 1..={f}")));
    }
    let surrogate = fit_surrogate(splits, config)?;
    let selected = select_top_k(&surrogate.report, k)?;
    let reference = retrain(splits, &(0..f).collect::<Vec<_>>(), config)?;
    let retrained = if selected.len() == f {
        reference.clone()
    } else {
        retrain(splits, &selected, config)?
    };
    let result = SelectionResult::new(&splits.train.field_names(), &selected, &retrained, &reference.metrics);
    Ok(SelectionOutcome {
        result,
        surrogate,
        retrained,
        reference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub auc: f64,
    pub logloss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCurve {
    pub points: Vec<CurvePoint>,
    pub reference_auc: f64,
    pub reference_logloss: f64,
    pub delta: f64,
    /// Smallest K whose AUC drop against the reference is at most `delta`.
    pub minimal_k: Option<usize>,
}

impl SelectionCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,auc,logloss,auc_drop,within_delta\n");
        for p in &self.points {
            let drop = self.reference_auc - p.auc;
            s.push_str(&format!(
                "{},{:?},{:?},{:?},{}\n",
                p.k,
                p.auc,
                p.logloss,
                drop,
                u8::from(drop <= self.delta)
            ));
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&serde_json::json!({
            "reference_auc": self.reference_auc,
            "reference_logloss": self.reference_logloss,
            "delta": self.delta,
            "minimal_k": self.minimal_k,
        }))?;
        s.push('\n');
        for p in &self.points {
            s.push_str(&serde_json::to_string(p)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Retrains on the top-K fields for every K in `k_list` using one surrogate
/// ranking.
pub fn selection_curve(
    splits: &Splits,
    config: &SelectionConfig,
    k_list: &[usize],
    delta: f64,
) -> Result<(SelectionCurve, Surrogate)> {
    let f = splits.train.n_fields();
    if k_list.is_empty() {
        return Err(Error::InvalidArgument("K list is empty".into()));
    }
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k > f) {
        return Err(Error::InvalidArgument(format!("K = {k} outside 1..={f}")));
    }
    let mut ks = k_list.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let surrogate = fit_surrogate(splits, config)?;
    let all: Vec<usize> = (0..f).collect();
    let reference = retrain(splits, &all, config)?;
    let mut points = Vec::with_capacity(ks.len());
    for &k in &ks {
        let selected = select_top_k(&surrogate.report, k)?;
        let metrics = if selected.len() == f {
            reference.metrics
        } else {
            retrain(splits, &selected, config)?.metrics
        };
        points.push(CurvePoint {
            k,
            auc: metrics.auc,
            logloss: metrics.logloss,
        });
    }
    let minimal_k = points
        .iter()
        .find(|p| reference.metrics.auc - p.auc <= delta)
        .map(|p| p.k);
    Ok((
        SelectionCurve {
            points,
            reference_auc: reference.metrics.auc,
            reference_logloss: reference.metrics.logloss,
            delta,
            minimal_k,
        },
        surrogate,
    ))
}
