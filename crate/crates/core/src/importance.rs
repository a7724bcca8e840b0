//! Field importance by path-aggregated gradients.
//!
//! For a sample with embedding block `e` and baseline `e~`, the anchors are
//! `e(t_m) = (1 - t_m) e + t_m e~` at `t_m = m / M`, `m = 0..=M`, with all
//! fields moved jointly. The per-field importance vector is
//!
//! ```text
//! I_i = (e_i - e~_i) ⊙ mean_m grad_{e_i(t_m)} L
//! ```
//!
//! where `L` is the sample's own cross-entropy. `M = 0` collapses to the
//! one-point gradient-times-displacement form. Summing the signed scores
//! over fields approaches `L(e) - L(e~)` as `M` grows, and is exact from
//! `M = 1` for losses that are quadratic along the path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Differentiable, EmbeddingBlock};
use crate::baselines::{
    compute_baseline, BaselineContext, BaselineKind, DatasetEmbeddingStats, ProjectionConfig,
};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::model::CtrModel;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `|sum_dims I|` per sample.
    AbsSum,
    /// `sum_dims I` per sample.
    SignedSum,
    /// `||I||_2` per sample.
    L2Sum,
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::AbsSum => "abs_sum",
            ScoreMode::SignedSum => "signed_sum",
            ScoreMode::L2Sum => "l2_sum",
        }
    }

    /// Scalar score of one per-field importance vector.
    pub fn scalarize(self, v: &[f64]) -> f64 {
        match self {
            ScoreMode::AbsSum => v.iter().sum::<f64>().abs(),
            ScoreMode::SignedSum => v.iter().sum(),
            ScoreMode::L2Sum => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// Contribution of a scalar per-sample score to the dataset total.
    fn accumulate(self, signed: f64) -> f64 {
        match self {
            ScoreMode::SignedSum => signed,
            ScoreMode::AbsSum | ScoreMode::L2Sum => signed.abs(),
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs_sum" => Ok(ScoreMode::AbsSum),
            "signed_sum" => Ok(ScoreMode::SignedSum),
            "l2_sum" => Ok(ScoreMode::L2Sum),
            other => Err(Error::InvalidArgument(format!("unknown score mode `{other}`"))),
        }
    }
}

/// Where the single gradient is taken when there are no interior anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientLocation {
    #[default]
    Input,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportanceConfig {
    pub baseline: BaselineKind,
    pub projection: ProjectionConfig,
    /// Anchor steps for the training regularizer.
    pub steps_train: usize,
    /// Anchor steps for validation scoring.
    pub steps_val: usize,
    pub lambda: f64,
    pub score_mode: ScoreMode,
    pub one_point_at: GradientLocation,
    pub batch_size: usize,
    /// Seed for the swap and uniform baselines.
    pub seed: u64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            baseline: BaselineKind::Smoothing,
            projection: ProjectionConfig::default(),
            steps_train: 0,
            steps_val: 10,
            lambda: 0.0,
            score_mode: ScoreMode::AbsSum,
            one_point_at: GradientLocation::Input,
            batch_size: 1024,
            seed: 0,
        }
    }
}

impl ImportanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_train > self.steps_val {
            return Err(Error::InvalidArgument(format!(
                "steps_train {} exceeds steps_val {}",
                self.steps_train, self.steps_val
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        self.projection.validate()
    }
}

/// Interpolated blocks from `e` (first) to `baseline` (last).
pub fn anchor_points(
    e: &EmbeddingBlock,
    baseline: &EmbeddingBlock,
    steps: usize,
) -> Result<Vec<EmbeddingBlock>> {
    e.check_same_shape(baseline)?;
    if steps == 0 {
        return Ok(vec![e.clone()]);
    }
    Ok((0..=steps)
        .map(|m| {
            let t = m as f64 / steps as f64;
            let data = e
                .data()
                .iter()
                .zip(baseline.data())
                .map(|(&a, &b)| (1.0 - t) * a + t * b)
                .collect();
            EmbeddingBlock::from_vec(e.samples(), e.fields(), e.dim(), data).expect("shape")
        })
        .collect())
}

/// Per-sample importance vectors and the path-mean gradients behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVectors {
    /// `(e - e~) ⊙ g_bar`, same shape as the input block.
    pub vectors: EmbeddingBlock,
    /// Mean per-sample loss gradient over the anchors.
    pub mean_grad: EmbeddingBlock,
}

impl ImportanceVectors {
    pub fn scores(&self, mode: ScoreMode) -> PerSampleScores {
        let v = &self.vectors;
        let mut scores = Vec::with_capacity(v.samples() * v.fields());
        for s in 0..v.samples() {
            for f in 0..v.fields() {
                scores.push(mode.scalarize(v.field(s, f)));
            }
        }
        PerSampleScores {
            samples: v.samples(),
            fields: v.fields(),
            scores,
        }
    }
}

pub fn importance_vectors(
    model: &dyn Differentiable,
    e: &EmbeddingBlock,
    labels: &[u8],
    baseline: &EmbeddingBlock,
    steps: usize,
    one_point_at: GradientLocation,
) -> Result<ImportanceVectors> {
    let anchors = if steps == 0 && one_point_at == GradientLocation::Baseline {
        e.check_same_shape(baseline)?;
        vec![baseline.clone()]
    } else {
        anchor_points(e, baseline, steps)?
    };
    let mut sum = EmbeddingBlock::zeros(e.samples(), e.fields(), e.dim());
    for a in &anchors {
        let (_, g) = model.per_sample_loss_grads(a, labels)?;
        for (acc, v) in sum.data_mut().iter_mut().zip(g.data()) {
            *acc += v;
        }
    }
    let k = anchors.len() as f64;
    sum.data_mut().iter_mut().for_each(|v| *v /= k);
    let data = e
        .data()
        .iter()
        .zip(baseline.data())
        .zip(sum.data())
        .map(|((&a, &b), &g)| (a - b) * g)
        .collect();
    Ok(ImportanceVectors {
        vectors: EmbeddingBlock::from_vec(e.samples(), e.fields(), e.dim(), data)?,
        mean_grad: sum,
    })
}

/// Row-major `samples x fields` scalar scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleScores {
    pub samples: usize,
    pub fields: usize,
    pub scores: Vec<f64>,
}

impl PerSampleScores {
    pub fn get(&self, s: usize, f: usize) -> f64 {
        self.scores[s * self.fields + f]
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        &self.scores[s * self.fields..(s + 1) * self.fields]
    }
}

/// Per-sample, per-field scores of the path-aggregated estimator.
pub fn aggregated_importance(
    model: &dyn Differentiable,
    e: &EmbeddingBlock,
    labels: &[u8],
    baseline: &EmbeddingBlock,
    steps: usize,
    mode: ScoreMode,
) -> Result<PerSampleScores> {
    Ok(importance_vectors(model, e, labels, baseline, steps, GradientLocation::Input)?.scores(mode))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub method: String,
    pub field_names: Vec<String>,
    pub scores: Vec<f64>,
    /// 1-based; rank 1 is the highest score.
    pub ranks: Vec<usize>,
    pub config: ImportanceConfig,
    pub samples: usize,
}

impl ImportanceReport {
    pub fn new(
        method: &str,
        field_names: Vec<String>,
        scores: Vec<f64>,
        config: ImportanceConfig,
        samples: usize,
    ) -> Self {
        let ranks = rank_descending(&scores);
        Self {
            method: method.to_string(),
            field_names,
            scores,
            ranks,
            config,
            samples,
        }
    }

    /// Field indices from highest to lowest score.
    pub fn order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.ranks.len()).collect();
        order.sort_by_key(|&i| self.ranks[i]);
        order
    }

    /// `field_name,score,rank` in field order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("field_name,score,rank\n");
        for ((name, score), rank) in self.field_names.iter().zip(&self.scores).zip(&self.ranks) {
            s.push_str(&format!("{},{:?},{}\n", csv_field(name), score, rank));
        }
        s
    }

    /// A header line with method, sample count and config, then one line per field.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&serde_json::json!({
            "method": self.method,
            "samples": self.samples,
            "config": self.config,
        }))?;
        s.push('\n');
        for i in 0..self.scores.len() {
            s.push_str(&serde_json::to_string(&serde_json::json!({
                "field_name": self.field_names[i],
                "score": self.scores[i],
                "rank": self.ranks[i],
            }))?);
            s.push('\n');
        }
        Ok(s)
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// 1-based descending ranks; equal scores rank by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Kendall rank correlation (tau-b) between two score vectors.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "kendall_tau needs equal lengths");
    let n = a.len();
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].total_cmp(&a[j]) as i64;
            let db = b[i].total_cmp(&b[j]) as i64;
            match (da, db) {
                (0, 0) => {}
                (0, _) => ties_a += 1,
                (_, 0) => ties_b += 1,
                _ if da == db => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let denom = (((concordant + discordant + ties_a) * (concordant + discordant + ties_b)) as f64)
        .sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / denom
}

fn batches(n: usize, batch_size: usize) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> {
    (0..n.div_ceil(batch_size)).map(move |b| (b, b * batch_size..((b + 1) * batch_size).min(n)))
}

fn batch_block(model: &CtrModel, dataset: &TabularDataset, rows: std::ops::Range<usize>) -> Result<(EmbeddingBlock, Vec<u8>)> {
    let f = dataset.n_fields();
    let block = model.embed(&dataset.indices[rows.start * f..rows.end * f])?;
    Ok((block, dataset.labels[rows].to_vec()))
}

fn batch_baseline(
    model: &CtrModel,
    block: &EmbeddingBlock,
    config: &ImportanceConfig,
    stats: Option<&DatasetEmbeddingStats>,
    tag: &str,
    batch: usize,
) -> Result<EmbeddingBlock> {
    let mut rng = seed::rng(config.seed, tag, batch as u64);
    let mut ctx = BaselineContext {
        stats,
        model: Some(model),
        rng: Some(&mut rng),
        projection: config.projection,
    };
    compute_baseline(config.baseline, block, &mut ctx)
}

/// Dataset-level scores of the path-aggregated estimator with
/// `config.steps_val` anchor steps, accumulated in batch order.
pub fn field_importance(
    model: &CtrModel,
    dataset: &TabularDataset,
    config: &ImportanceConfig,
    stats: Option<&DatasetEmbeddingStats>,
) -> Result<ImportanceReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("importance needs a non-empty validation split".into()));
    }
    let f = dataset.n_fields();
    let mut totals = vec![0.0; f];
    for (b, rows) in batches(dataset.len(), config.batch_size) {
        let (block, labels) = batch_block(model, dataset, rows)?;
        let base = batch_baseline(model, &block, config, stats, "importance-baseline", b)?;
        let iv = importance_vectors(model, &block, &labels, &base, config.steps_val, config.one_point_at)?;
        accumulate_vectors(&iv.vectors, config.score_mode, &mut totals);
    }
    Ok(ImportanceReport::new(
        "aggregated",
        dataset.field_names(),
        totals,
        config.clone(),
        dataset.len(),
    ))
}

fn accumulate_vectors(v: &EmbeddingBlock, mode: ScoreMode, totals: &mut [f64]) {
    for s in 0..v.samples() {
        for (f, t) in totals.iter_mut().enumerate() {
            let vec = v.field(s, f);
            *t += match mode {
                ScoreMode::L2Sum => ScoreMode::L2Sum.scalarize(vec),
                _ => mode.accumulate(ScoreMode::SignedSum.scalarize(vec)),
            };
        }
    }
}

/// `L_s(E) - L_s(E with field `field` taken from `baseline`)` per sample.
pub fn exact_per_sample(
    model: &dyn Differentiable,
    e: &EmbeddingBlock,
    labels: &[u8],
    baseline: &EmbeddingBlock,
    field: usize,
) -> Result<Vec<f64>> {
    if field >= e.fields() {
        return Err(Error::InvalidArgument(format!("field index {field} out of range")));
    }
    let replaced = e.with_field_from(field, baseline)?;
    let with = model.per_sample_losses(e, labels)?;
    let without = model.per_sample_losses(&replaced, labels)?;
    Ok(with.iter().zip(&without).map(|(a, b)| a - b).collect())
}

/// Mean loss with field `field` intact minus mean loss with it replaced by
/// the baseline produced by `make_baseline(block, batch_index)`.
pub fn exact_importance_with(
    model: &CtrModel,
    dataset: &TabularDataset,
    field: usize,
    batch_size: usize,
    make_baseline: &mut dyn FnMut(&EmbeddingBlock, usize) -> Result<EmbeddingBlock>,
) -> Result<f64> {
    if field >= dataset.n_fields() {
        return Err(Error::InvalidArgument(format!("field index {field} out of range")));
    }
    if dataset.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("empty dataset or zero batch size".into()));
    }
    let mut total = 0.0;
    for (b, rows) in batches(dataset.len(), batch_size) {
        let (block, labels) = batch_block(model, dataset, rows)?;
        let base = make_baseline(&block, b)?;
        total += exact_per_sample(model, &block, &labels, &base, field)?
            .iter()
            .sum::<f64>();
    }
    Ok(total / dataset.len() as f64)
}

/// Two-pass loss difference for one field under `config.baseline`. With the
/// swap baseline this is permutation importance.
pub fn exact_importance(
    model: &CtrModel,
    dataset: &TabularDataset,
    field: usize,
    config: &ImportanceConfig,
    stats: Option<&DatasetEmbeddingStats>,
) -> Result<f64> {
    exact_importance_with(model, dataset, field, config.batch_size, &mut |block, b| {
        batch_baseline(model, block, config, stats, "exact-baseline", b)
    })
}

/// Exact per-sample loss differences for every field, aggregated like
/// [`field_importance`]: signed, or absolute per sample.
pub fn exact_report(
    model: &CtrModel,
    dataset: &TabularDataset,
    config: &ImportanceConfig,
    stats: Option<&DatasetEmbeddingStats>,
) -> Result<ImportanceReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("exact importance needs a non-empty dataset".into()));
    }
    let f = dataset.n_fields();
    let mut totals = vec![0.0; f];
    for (b, rows) in batches(dataset.len(), config.batch_size) {
        let (block, labels) = batch_block(model, dataset, rows)?;
        let base = batch_baseline(model, &block, config, stats, "exact-baseline", b)?;
        for (field, t) in totals.iter_mut().enumerate() {
            for d in exact_per_sample(model, &block, &labels, &base, field)? {
                *t += config.score_mode.accumulate(d);
            }
        }
    }
    Ok(ImportanceReport::new(
        "exact",
        dataset.field_names(),
        totals,
        config.clone(),
        dataset.len(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// One-point gradient times displacement from zero.
    Snip,
    /// One-point gradient times displacement from the training mean.
    Shark,
    /// Per-field gradient norm at the input.
    Sfs,
    /// Permutation importance (exact loss difference under swap).
    Pfi,
}

impl Comparator {
    pub fn as_str(self) -> &'static str {
        match self {
            Comparator::Snip => "snip",
            Comparator::Shark => "shark",
            Comparator::Sfs => "sfs",
            Comparator::Pfi => "pfi",
        }
    }
}

impl FromStr for Comparator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snip" => Ok(Comparator::Snip),
            "shark" => Ok(Comparator::Shark),
            "sfs" => Ok(Comparator::Sfs),
            "pfi" => Ok(Comparator::Pfi),
            other => Err(Error::InvalidArgument(format!("unknown comparator `{other}`"))),
        }
    }
}

/// Scores from a reference estimator, aggregated exactly like
/// [`field_importance`]. `shark` needs training statistics.
pub fn comparator_importance(
    method: Comparator,
    model: &CtrModel,
    dataset: &TabularDataset,
    config: &ImportanceConfig,
    stats: Option<&DatasetEmbeddingStats>,
) -> Result<ImportanceReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("importance needs a non-empty dataset".into()));
    }
    let f = dataset.n_fields();
    let mut totals = vec![0.0; f];
    for (b, rows) in batches(dataset.len(), config.batch_size) {
        let (block, labels) = batch_block(model, dataset, rows)?;
        match method {
            Comparator::Snip | Comparator::Shark => {
                let base = if method == Comparator::Snip {
                    EmbeddingBlock::zeros(block.samples(), block.fields(), block.dim())
                } else {
                    let stats = stats.ok_or_else(|| {
                        Error::InvalidArgument("shark needs training statistics".into())
                    })?;
                    let mut ctx = BaselineContext::new().with_stats(stats);
                    compute_baseline(BaselineKind::Mean, &block, &mut ctx)?
                };
                let iv = importance_vectors(model, &block, &labels, &base, 0, GradientLocation::Input)?;
                accumulate_vectors(&iv.vectors, config.score_mode, &mut totals);
            }
            Comparator::Sfs => {
                let (_, g) = model.per_sample_loss_grads(&block, &labels)?;
                for s in 0..g.samples() {
                    for (k, t) in totals.iter_mut().enumerate() {
                        *t += ScoreMode::L2Sum.scalarize(g.field(s, k));
                    }
                }
            }
            Comparator::Pfi => {
                let mut swap = config.clone();
                swap.baseline = BaselineKind::Swap;
                let base = batch_baseline(model, &block, &swap, stats, "pfi-baseline", b)?;
                for (k, t) in totals.iter_mut().enumerate() {
                    for d in exact_per_sample(model, &block, &labels, &base, k)? {
                        *t += config.score_mode.accumulate(d);
                    }
                }
            }
        }
    }
    Ok(ImportanceReport::new(
        method.as_str(),
        dataset.field_names(),
        totals,
        config.clone(),
        dataset.len(),
    ))
}

/// `lambda * mean_s sum_i ||I_si||_2`.
pub fn regularization_loss(vectors: &EmbeddingBlock, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")));
    }
    if lambda == 0.0 || vectors.samples() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in 0..vectors.samples() {
        for f in 0..vectors.fields() {
            total += ScoreMode::L2Sum.scalarize(vectors.field(s, f));
        }
    }
    Ok(lambda * total / vectors.samples() as f64)
}

/// Gradient of [`regularization_loss`] with respect to the input block,
/// holding the mean gradient fixed. The derivative reaches the inputs
/// through the displacement `e - e~`; for the smoothing baseline that
/// includes the dependence of `e~` on the sample's own fields.
pub fn regularization_grad(
    iv: &ImportanceVectors,
    kind: BaselineKind,
    lambda: f64,
) -> Result<EmbeddingBlock> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")));
    }
    let v = &iv.vectors;
    let (n, fields, dim) = (v.samples(), v.fields(), v.dim());
    let mut out = EmbeddingBlock::zeros(n, fields, dim);
    if lambda == 0.0 || n == 0 {
        return Ok(out);
    }
    let scale = lambda / n as f64;
    let mut mean = vec![0.0; dim];
    for s in 0..n {
        for f in 0..fields {
            let i = v.field(s, f);
            let norm = ScoreMode::L2Sum.scalarize(i);
            if norm == 0.0 {
                continue;
            }
            let g = iv.mean_grad.field(s, f);
            for ((o, &ik), &gk) in out.field_mut(s, f).iter_mut().zip(i).zip(g) {
                *o = scale * gk * ik / norm;
            }
        }
        if kind.depends_on_sample() {
            mean.iter_mut().for_each(|m| *m = 0.0);
            for f in 0..fields {
                for (m, &o) in mean.iter_mut().zip(out.field(s, f)) {
                    *m += o / fields as f64;
                }
            }
            for f in 0..fields {
                for (o, &m) in out.field_mut(s, f).iter_mut().zip(&mean) {
                    *o -= m;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::baselines::smoothing_baseline;
    use crate::model::{Arch, FieldSchema};
    use proptest::prelude::*;

    /// `L(x) = x^2 + 3` as a one-field, one-dim differentiable map: the
    /// "logit" is x and the cotangent hook receives the loss derivative.
    struct Quadratic;

    impl Differentiable for Quadratic {
        fn n_fields(&self) -> usize {
            1
        }
        fn embed_dim(&self) -> usize {
            1
        }
        fn logits(&self, block: &EmbeddingBlock) -> Result<Vec<f64>> {
            Ok(block.data().to_vec())
        }
        fn input_vjp(
            &self,
            block: &EmbeddingBlock,
            cotangent: &mut dyn FnMut(usize, f64) -> f64,
        ) -> Result<(Vec<f64>, EmbeddingBlock)> {
            let g: Vec<f64> = block
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
            let l = block.data().iter().map(|x| x * x + 3.0).collect();
            let g = block.data().iter().map(|x| 2.0 * x).collect();
            Ok((l, EmbeddingBlock::from_vec(block.samples(), 1, 1, g)?))
        }
        fn per_sample_losses(&self, block: &EmbeddingBlock, _labels: &[u8]) -> Result<Vec<f64>> {
            Ok(block.data().iter().map(|x| x * x + 3.0).collect())
        }
    }

    fn one(x: f64) -> EmbeddingBlock {
        EmbeddingBlock::from_vec(1, 1, 1, vec![x]).unwrap()
    }

    #[test]
    fn anchors() {
        let a = anchor_points(&one(2.0), &one(0.0), 0).unwrap();
        assert_eq!(a, vec![one(2.0)]);
        let a = anchor_points(&one(2.0), &one(0.0), 1).unwrap();
        assert_eq!(a, vec![one(2.0), one(0.0)]);
        let a = anchor_points(&one(1.0), &one(0.0), 4).unwrap();
        let ts: Vec<f64> = a.iter().map(|b| 1.0 - b.data()[0]).collect();
        assert_eq!(ts, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let bad = EmbeddingBlock::zeros(1, 2, 1);
        assert!(anchor_points(&one(1.0), &bad, 2).is_err());
    }

    #[test]
    fn quadratic_demo_values() {
        let s1 = aggregated_importance(&Quadratic, &one(2.0), &[0], &one(0.0), 1, ScoreMode::SignedSum)
            .unwrap();
        assert_eq!(s1.scores, vec![4.0]);
        let s0 = aggregated_importance(&Quadratic, &one(2.0), &[0], &one(0.0), 0, ScoreMode::SignedSum)
            .unwrap();
        assert_eq!(s0.scores, vec![8.0]);
        let at_base = importance_vectors(&Quadratic, &one(2.0), &[0], &one(0.0), 0, GradientLocation::Baseline)
            .unwrap();
        assert_eq!(at_base.vectors.data(), &[0.0]);
    }

    #[test]
    fn zero_displacement_gives_zero_scores() {
        let s = FieldSchema::new(vec![("a".into(), 2), ("b".into(), 2)], 3).unwrap();
        let m = CtrModel::new(s, Arch::FmMlp, &[4], 3).unwrap();
        let e = m.embed(&[1, 0, 0, 1]).unwrap();
        for steps in [0, 1, 5] {
            for mode in [ScoreMode::AbsSum, ScoreMode::SignedSum, ScoreMode::L2Sum] {
                let sc = aggregated_importance(&m, &e, &[1, 0], &e, steps, mode).unwrap();
                assert!(sc.scores.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn ranks_break_ties_by_index() {
        assert_eq!(rank_descending(&[5.0, 1.0, 3.0]), vec![1, 3, 2]);
        assert_eq!(rank_descending(&[2.0, 2.0]), vec![1, 2]);
        assert_eq!(rank_descending(&[]), Vec::<usize>::new());
    }

    #[test]
    fn kendall_tau_extremes() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    }

    #[test]
    fn signed_and_abs_aggregation_differ_under_cancellation() {
        let mut signed = vec![0.0];
        let mut abs = vec![0.0];
        let v = EmbeddingBlock::from_vec(2, 1, 1, vec![2.0, -2.0]).unwrap();
        accumulate_vectors(&v, ScoreMode::SignedSum, &mut signed);
        accumulate_vectors(&v, ScoreMode::AbsSum, &mut abs);
        assert_eq!(signed, vec![0.0]);
        assert_eq!(abs, vec![4.0]);
    }

    #[test]
    fn regularization_examples() {
        let v = EmbeddingBlock::from_vec(1, 1, 2, vec![3.0, 4.0]).unwrap();
        assert!((regularization_loss(&v, 0.1).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(regularization_loss(&v, 0.0).unwrap(), 0.0);
        assert_eq!(regularization_loss(&EmbeddingBlock::zeros(3, 2, 2), 5.0).unwrap(), 0.0);
        assert!(regularization_loss(&v, -1.0).is_err());
    }

    #[test]
    fn regularization_grad_matches_finite_differences() {
        // Holding g_bar fixed, R(e) = lambda/n * sum ||(e - smooth(e)) ⊙ g||.
        let n = 2;
        let (fields, dim) = (3, 2);
        let e: Vec<f64> = (0..n * fields * dim).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..n * fields * dim).map(|i| (i as f64 * 0.91).cos()).collect();
        let lambda = 0.3;
        let reg = |e: &[f64]| {
            let b = EmbeddingBlock::from_vec(n, fields, dim, e.to_vec()).unwrap();
            let base = smoothing_baseline(&b);
            let v: Vec<f64> = b
                .data()
                .iter()
                .zip(base.data())
                .zip(&g)
                .map(|((a, b), g)| (a - b) * g)
                .collect();
            regularization_loss(&EmbeddingBlock::from_vec(n, fields, dim, v).unwrap(), lambda).unwrap()
        };
        let b = EmbeddingBlock::from_vec(n, fields, dim, e.clone()).unwrap();
        let base = smoothing_baseline(&b);
        let v: Vec<f64> = e.iter().zip(base.data()).zip(&g).map(|((a, b), g)| (a - b) * g).collect();
        let iv = ImportanceVectors {
            vectors: EmbeddingBlock::from_vec(n, fields, dim, v).unwrap(),
            mean_grad: EmbeddingBlock::from_vec(n, fields, dim, g.clone()).unwrap(),
        };
        let grad = regularization_grad(&iv, BaselineKind::Smoothing, lambda).unwrap();
        for i in 0..e.len() {
            let mut up = e.clone();
            up[i] += 1e-6;
            let mut down = e.clone();
            down[i] -= 1e-6;
            let fd = (reg(&up) - reg(&down)) / 2e-6;
            assert!((fd - grad.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn exact_is_antisymmetric_and_zero_on_identity() {
        let s = FieldSchema::new(vec![("a".into(), 3), ("b".into(), 3)], 2).unwrap();
        let m = CtrModel::new(s, Arch::Mlp, &[5], 8).unwrap();
        let e = m.embed(&[1, 2, 2, 1]).unwrap();
        let other = m.embed(&[2, 0, 0, 2]).unwrap();
        let labels = [1, 0];
        let fwd = exact_per_sample(&m, &e, &labels, &other, 0).unwrap();
        let swapped = e.with_field_from(0, &other).unwrap();
        let back = exact_per_sample(&m, &swapped, &labels, &e, 0).unwrap();
        for (a, b) in fwd.iter().zip(&back) {
            assert_eq!(*a, -*b);
        }
        assert!(exact_per_sample(&m, &e, &labels, &e, 1).unwrap().iter().all(|&v| v == 0.0));
        assert!(exact_per_sample(&m, &e, &labels, &e, 2).is_err());
    }

    #[test]
    fn exact_on_hand_set_linear_model() {
        let s = FieldSchema::new(vec![("a".into(), 2), ("b".into(), 2)], 1).unwrap();
        let mut m = CtrModel::new(s, Arch::Linear, &[], 0).unwrap();
        m.linear.as_mut().unwrap().data_mut().copy_from_slice(&[2.0, -1.0]);
        m.bias.set(0, 0, 0.5);
        let e = EmbeddingBlock::from_vec(1, 2, 1, vec![1.0, 3.0]).unwrap();
        let zero = EmbeddingBlock::zeros(1, 2, 1);
        let got = exact_per_sample(&m, &e, &[1], &zero, 0).unwrap()[0];
        // z = 2 - 3 + 0.5 = -0.5 with the field, -2.5 without.
        let want = -sigmoid(-0.5).ln() + sigmoid(-2.5).ln();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = ImportanceConfig::default();
        assert!(c.validate().is_ok());
        c.steps_train = 11;
        assert!(c.validate().is_err());
        c.steps_train = 0;
        c.lambda = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn report_csv_and_jsonl() {
        let r = ImportanceReport::new(
            "aggregated",
            vec!["f1".into(), "f2".into(), "f3".into()],
            vec![5.0, 1.0, 3.0],
            ImportanceConfig::default(),
            7,
        );
        assert_eq!(r.to_csv(), "field_name,score,rank\nf1,5.0,1\nf2,1.0,3\nf3,3.0,2\n");
        assert_eq!(r.order(), vec![0, 2, 1]);
        let jl = r.to_jsonl().unwrap();
        assert_eq!(jl.lines().count(), 4);
        let head: serde_json::Value = serde_json::from_str(jl.lines().next().unwrap()).unwrap();
        assert_eq!(head["config"]["steps_val"], 10);
    }

    proptest! {
        #[test]
        fn ranks_are_a_permutation(scores in proptest::collection::vec(-10.0f64..10.0, 1..30)) {
            let mut r = rank_descending(&scores);
            r.sort_unstable();
            prop_assert_eq!(r, (1..=scores.len()).collect::<Vec<_>>());
        }

        #[test]
        fn completeness_on_linear_logit_with_quadratic_loss(x in -3.0f64..3.0, b in -3.0f64..3.0, steps in 1usize..10) {
            let s = aggregated_importance(&Quadratic, &one(x), &[0], &one(b), steps, ScoreMode::SignedSum).unwrap();
            let exact = (x * x + 3.0) - (b * b + 3.0);
            prop_assert!((s.scores[0] - exact).abs() < 1e-9);
        }
    }
}
