//! Non-informative baseline embeddings.
//!
//! Every kind maps a block of per-sample embeddings to a block of the same
//! shape. `Smoothing` replaces every field of a sample by the mean of that
//! sample's own field vectors. `BoundaryProjection` walks each sample toward
//! the decision boundary `f(E) = D_b` by gradient steps on
//! `(f(E) - D_b)^2 / 2`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Differentiable, EmbeddingBlock};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::model::CtrModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Zero,
    Mean,
    Swap,
    Uniform,
    Smoothing,
    BoundaryProjection,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        BaselineKind::Zero,
        BaselineKind::Mean,
        BaselineKind::Swap,
        BaselineKind::Uniform,
        BaselineKind::Smoothing,
        BaselineKind::BoundaryProjection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Zero => "zero",
            BaselineKind::Mean => "mean",
            BaselineKind::Swap => "swap",
            BaselineKind::Uniform => "uniform",
            BaselineKind::Smoothing => "smoothing",
            BaselineKind::BoundaryProjection => "boundary_projection",
        }
    }

    /// Whether training statistics (or the positive rate they carry) can be needed.
    pub fn needs_stats(self) -> bool {
        matches!(
            self,
            BaselineKind::Mean | BaselineKind::Uniform | BaselineKind::BoundaryProjection
        )
    }

    /// Whether the baseline is a function of the sample's own embeddings, so
    /// that gradients can flow through it.
    pub fn depends_on_sample(self) -> bool {
        matches!(self, BaselineKind::Smoothing)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline kind `{s}`")))
    }
}

/// Logit value of the decision boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionBoundary {
    Fixed(f64),
    /// `ln(p / (1 - p))` for the training positive rate `p`.
    EmpiricalPrior,
}

impl Default for DecisionBoundary {
    fn default() -> Self {
        DecisionBoundary::Fixed(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub eta: f64,
    pub boundary: DecisionBoundary,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            boundary: DecisionBoundary::default(),
            max_iters: 200,
            tol: 1e-3,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument("projection eta must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("projection max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("projection tol must be > 0".into()));
        }
        Ok(())
    }

    pub fn boundary_logit(&self, positive_rate: Option<f64>) -> Result<f64> {
        match self.boundary {
            DecisionBoundary::Fixed(v) => Ok(v),
            DecisionBoundary::EmpiricalPrior => {
                let p = positive_rate.ok_or_else(|| {
                    Error::InvalidArgument("empirical boundary needs a training positive rate".into())
                })?;
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "positive rate {p} gives no finite boundary"
                    )));
                }
                Ok((p / (1.0 - p)).ln())
            }
        }
    }
}

/// Per-field embedding statistics over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEmbeddingStats {
    pub fields: usize,
    pub dim: usize,
    /// `[field][dim]`.
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub positive_rate: f64,
}

impl DatasetEmbeddingStats {
    pub fn from_dataset(model: &CtrModel, train: &TabularDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot take statistics of an empty split".into()));
        }
        let f = model.schema.len();
        let d = model.schema.embed_dim;
        let w = f * d;
        let mut sum = vec![0.0; w];
        let mut min = vec![f64::INFINITY; w];
        let mut max = vec![f64::NEG_INFINITY; w];
        for chunk in (0..train.len()).collect::<Vec<_>>().chunks(4096) {
            let idx: Vec<usize> = chunk.iter().flat_map(|&r| train.row(r).iter().copied()).collect();
            let block = model.embed(&idx)?;
            for s in 0..block.samples() {
                for (j, &v) in block.sample(s).iter().enumerate() {
                    sum[j] += v;
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
        }
        let n = train.len() as f64;
        Ok(Self {
            fields: f,
            dim: d,
            mean: sum.into_iter().map(|v| v / n).collect(),
            min,
            max,
            positive_rate: train.positive_rate(),
        })
    }

    fn check(&self, block: &EmbeddingBlock) -> Result<()> {
        if self.fields != block.fields() || self.dim != block.dim() {
            return Err(Error::Shape("statistics do not match embedding block".into()));
        }
        Ok(())
    }
}

/// Everything a baseline kind may need besides the sample block.
pub struct BaselineContext<'a> {
    pub stats: Option<&'a DatasetEmbeddingStats>,
    pub model: Option<&'a dyn Differentiable>,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub projection: ProjectionConfig,
}

impl<'a> BaselineContext<'a> {
    pub fn new() -> Self {
        Self {
            stats: None,
            model: None,
            rng: None,
            projection: ProjectionConfig::default(),
        }
    }

    pub fn with_stats(mut self, stats: &'a DatasetEmbeddingStats) -> Self {
        self.stats = Some(stats);
        self
    }

    pub fn with_model(mut self, model: &'a dyn Differentiable) -> Self {
        self.model = Some(model);
        self
    }

    pub fn with_rng(mut self, rng: &'a mut ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn with_projection(mut self, projection: ProjectionConfig) -> Self {
        self.projection = projection;
        self
    }

    pub fn boundary_logit(&self) -> Result<f64> {
        self.projection
            .boundary_logit(self.stats.map(|s| s.positive_rate))
    }
}

impl Default for BaselineContext<'_> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn compute_baseline(
    kind: BaselineKind,
    block: &EmbeddingBlock,
    ctx: &mut BaselineContext<'_>,
) -> Result<EmbeddingBlock> {
    match kind {
        BaselineKind::Zero => Ok(EmbeddingBlock::zeros(
            block.samples(),
            block.fields(),
            block.dim(),
        )),
        BaselineKind::Mean => {
            let stats = ctx.stats.ok_or_else(|| missing("mean", "statistics"))?;
            stats.check(block)?;
            let mut out = block.clone();
            for s in 0..block.samples() {
                out.sample_mut(s).copy_from_slice(&stats.mean);
            }
            Ok(out)
        }
        BaselineKind::Swap => {
            let rng = ctx.rng.as_deref_mut().ok_or_else(|| missing("swap", "rng"))?;
            let perms = draw_swap_permutations(block.samples(), block.fields(), rng);
            swap_baseline(block, &perms)
        }
        BaselineKind::Uniform => {
            let stats = ctx.stats.ok_or_else(|| missing("uniform", "statistics"))?;
            stats.check(block)?;
            let rng = ctx.rng.as_deref_mut().ok_or_else(|| missing("uniform", "rng"))?;
            let mut out = block.clone();
            for s in 0..block.samples() {
                for (j, v) in out.sample_mut(s).iter_mut().enumerate() {
                    let (lo, hi) = (stats.min[j], stats.max[j]);
                    *v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                }
            }
            Ok(out)
        }
        BaselineKind::Smoothing => Ok(smoothing_baseline(block)),
        BaselineKind::BoundaryProjection => {
            let model = ctx
                .model
                .ok_or_else(|| missing("boundary_projection", "model"))?;
            let d_b = ctx.boundary_logit()?;
            Ok(project_to_boundary(model, block, d_b, &ctx.projection)?.block)
        }
    }
}

fn missing(kind: &str, what: &str) -> Error {
    Error::InvalidArgument(format!("baseline `{kind}` needs {what}"))
}

/// Every field of a sample replaced by the mean of its field vectors.
pub fn smoothing_baseline(block: &EmbeddingBlock) -> EmbeddingBlock {
    let (n, f, d) = (block.samples(), block.fields(), block.dim());
    let mut out = EmbeddingBlock::zeros(n, f, d);
    let mut mean = vec![0.0; d];
    for s in 0..n {
        mean.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..f {
            for (m, &h) in mean.iter_mut().zip(block.field(s, k)) {
                *m += h;
            }
        }
        mean.iter_mut().for_each(|v| *v /= f as f64);
        for k in 0..f {
            out.field_mut(s, k).copy_from_slice(&mean);
        }
    }
    out
}

/// One uniformly random permutation of the batch per field.
pub fn draw_swap_permutations(
    samples: usize,
    fields: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    (0..fields)
        .map(|_| {
            let mut p: Vec<usize> = (0..samples).collect();
            p.shuffle(rng);
            p
        })
        .collect()
}

/// Field `k` of sample `s` taken from sample `perms[k][s]`.
pub fn swap_baseline(block: &EmbeddingBlock, perms: &[Vec<usize>]) -> Result<EmbeddingBlock> {
    if perms.len() != block.fields() || perms.iter().any(|p| p.len() != block.samples()) {
        return Err(Error::Shape("one permutation of the batch per field".into()));
    }
    let mut out = block.clone();
    for (k, perm) in perms.iter().enumerate() {
        for (s, &src) in perm.iter().enumerate() {
            if src >= block.samples() {
                return Err(Error::InvalidArgument(format!("permutation entry {src} out of range")));
            }
            out.field_mut(s, k).copy_from_slice(block.field(src, k));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub block: EmbeddingBlock,
    /// Final `|f(E~) - D_b|` per sample.
    pub residuals: Vec<f64>,
    /// Gradient steps attempted per sample.
    pub iterations: Vec<usize>,
}

impl Projection {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Gradient descent of each sample toward `f(E~) = D_b`, starting at `E`:
/// `E~ <- E~ - eta_s (f(E~) - D_b) grad f(E~)`, with `eta_s` starting at
/// `cfg.eta`. A step that would increase the residual is rejected and that
/// sample's `eta_s` halved, so the tracked residual never grows; an accepted
/// step grows `eta_s` by half, so flat regions do not exhaust `max_iters`.
///
/// Steps landing on a zero gradient above `tol` are rejected too, so only
/// a starting point without a descent direction raises `ZeroGradient`. On
/// ReLU models the descent can stall against a region where every unit of
/// some layer is dead and the logit is constant; such samples end at
/// `max_iters` with their residual reported.
pub fn project_to_boundary(
    model: &dyn Differentiable,
    block: &EmbeddingBlock,
    d_b: f64,
    cfg: &ProjectionConfig,
) -> Result<Projection> {
    cfg.validate()?;
    let n = block.samples();
    let mut x = block.clone();
    let (mut f, mut g) = model.input_vjp(&x, &mut |_, _| 1.0)?;
    let mut eta = vec![cfg.eta; n];
    let mut iterations = vec![0usize; n];

    for _ in 0..cfg.max_iters {
        let active: Vec<usize> = (0..n).filter(|&s| (f[s] - d_b).abs() > cfg.tol).collect();
        if active.is_empty() {
            break;
        }
        let mut candidate = x.clone();
        for &s in &active {
            let r = f[s] - d_b;
            let gs = g.sample(s);
            if gs.iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroGradient { residual: r.abs() });
            }
            let step = eta[s] * r;
            for (c, &gv) in candidate.sample_mut(s).iter_mut().zip(gs) {
                *c -= step * gv;
            }
        }
        let (fc, gc) = model.input_vjp(&candidate, &mut |_, _| 1.0)?;
        for &s in &active {
            iterations[s] += 1;
            let rc = (fc[s] - d_b).abs();
            let live = rc <= cfg.tol || gc.sample(s).iter().any(|&v| v != 0.0);
            if rc <= (f[s] - d_b).abs() && live {
                x.sample_mut(s).copy_from_slice(candidate.sample(s));
                g.sample_mut(s).copy_from_slice(gc.sample(s));
                f[s] = fc[s];
                eta[s] *= 1.5;
            } else {
                eta[s] *= 0.5;
            }
        }
    }

    Ok(Projection {
        residuals: f.iter().map(|v| (v - d_b).abs()).collect(),
        block: x,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub kind: BaselineKind,
    /// Mean `|f(E~) - D_b|`.
    pub mean_logit_distance: f64,
    /// Mean `||E - E~||_2`.
    pub mean_embedding_distance: f64,
    /// Mean `sigmoid(f(E~))`.
    pub mean_probability: f64,
}

/// Distance of each baseline kind from the decision boundary, and from the
/// samples themselves, averaged over `dataset`.
pub fn baseline_logit_audit(
    model: &CtrModel,
    dataset: &TabularDataset,
    kinds: &[BaselineKind],
    ctx: &mut BaselineContext<'_>,
) -> Result<Vec<AuditRow>> {
    if dataset.is_empty() {
        return Err(Error::Data("audit needs a non-empty dataset".into()));
    }
    let d_b = ctx.boundary_logit()?;
    let mut out = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let (mut logit_dist, mut emb_dist, mut prob) = (0.0, 0.0, 0.0);
        for chunk in (0..dataset.len()).collect::<Vec<_>>().chunks(1024) {
            let idx: Vec<usize> = chunk
                .iter()
                .flat_map(|&r| dataset.row(r).iter().copied())
                .collect();
            let block = model.embed(&idx)?;
            let base = {
                let mut inner = BaselineContext {
                    stats: ctx.stats,
                    model: Some(model),
                    rng: ctx.rng.as_deref_mut(),
                    projection: ctx.projection,
                };
                compute_baseline(kind, &block, &mut inner)?
            };
            let z = model.logits(&base)?;
            for s in 0..block.samples() {
                logit_dist += (z[s] - d_b).abs();
                prob += crate::autodiff::sigmoid(z[s]);
                emb_dist += block
                    .sample(s)
                    .iter()
                    .zip(base.sample(s))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let n = dataset.len() as f64;
        out.push(AuditRow {
            kind,
            mean_logit_distance: logit_dist / n,
            mean_embedding_distance: emb_dist / n,
            mean_probability: prob / n,
        });
    }
    Ok(out)
}

/// `kind,mean_logit_distance,mean_embedding_distance` CSV.
pub fn audit_to_csv(rows: &[AuditRow]) -> String {
    let mut s = String::from("kind,mean_logit_distance,mean_embedding_distance\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:?},{:?}\n",
            r.kind, r.mean_logit_distance, r.mean_embedding_distance
        ));
    }
    s
}
