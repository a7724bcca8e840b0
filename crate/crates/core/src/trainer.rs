//! Mini-batch Adam training with the importance regularizer, early stopping
//! on validation AUC, and evaluation metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_backward, sigmoid, DenseMatrix, Differentiable};
use crate::baselines::{compute_baseline, BaselineContext, DatasetEmbeddingStats};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::importance::{importance_vectors, regularization_grad, regularization_loss, ImportanceConfig};
use crate::model::CtrModel;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Regularizer settings: `lambda`, `steps_train`, baseline kind.
    pub importance: ImportanceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 20,
            patience: 2,
            seed: 0,
            importance: ImportanceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("adam epsilon must be > 0".into()));
        }
        self.importance.validate()
    }
}

/// Adam with bias correction over a list of parameter matrices.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|(r, c)| vec![0.0; r * c]).collect(),
            v: shapes.iter().map(|(r, c)| vec![0.0; r * c]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_cross_entropy: f64,
    pub train_regularizer: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the best validation AUC; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_cross_entropy,train_regularizer,val_auc,val_logloss,best\n");
        for (i, r) in self.epochs.iter().enumerate() {
            s.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{}\n",
                r.epoch,
                r.train_cross_entropy,
                r.train_regularizer,
                r.val_auc,
                r.val_logloss,
                u8::from(self.best_epoch == Some(i))
            ));
        }
        s
    }
}

/// AUC by the Mann-Whitney rank statistic with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean cross-entropy of probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn logloss(probs: &[f64], labels: &[u8]) -> f64 {
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    sum / probs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub logloss: f64,
}

pub fn predict_dataset(model: &CtrModel, dataset: &TabularDataset) -> Result<Vec<f64>> {
    let f = dataset.n_fields();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.indices.chunks(4096 * f) {
        let block = model.embed(chunk)?;
        out.extend(model.logits(&block)?.into_iter().map(sigmoid));
    }
    Ok(out)
}

/// Test-set AUC and logloss. A single-class dataset yields
/// [`Error::SingleClass`] carrying the logloss.
pub fn evaluate(model: &CtrModel, dataset: &TabularDataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let probs = predict_dataset(model, dataset)?;
    let ll = logloss(&probs, &dataset.labels);
    match auc(&probs, &dataset.labels) {
        Some(a) => Ok(Metrics { auc: a, logloss: ll }),
        None => Err(Error::SingleClass { logloss: ll }),
    }
}

/// Trains `model` and returns the parameters of the epoch with the best
/// validation AUC together with the per-epoch history.
pub fn train(
    model: &CtrModel,
    train_set: &TabularDataset,
    val_set: &TabularDataset,
    config: &TrainConfig,
) -> Result<(CtrModel, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let mut current = model.clone();
    let mut best = model.clone();
    let mut history = TrainHistory::default();
    if config.max_epochs == 0 {
        return Ok((best, history));
    }

    let shapes: Vec<(usize, usize)> = current.all_params_mut().iter().map(|p| p.shape()).collect();
    let mut adam = Adam::new(&shapes, config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let n_tables = current.embeddings.len();
    let imp = &config.importance;
    let regularize = imp.lambda > 0.0;
    let f = train_set.n_fields();
    let d = current.schema.embed_dim;

    let mut best_auc = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(config.seed, "epoch-shuffle", epoch as u64));
        let stats = if regularize && imp.baseline.needs_stats() {
            Some(DatasetEmbeddingStats::from_dataset(&current, train_set)?)
        } else {
            None
        };

        let (mut ce_sum, mut reg_sum) = (0.0, 0.0);
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let idx: Vec<usize> = rows.iter().flat_map(|&r| train_set.row(r).iter().copied()).collect();
            let labels: Vec<u8> = rows.iter().map(|&r| train_set.labels[r]).collect();
            let block = current.embed(&idx)?;
            let bundle = forward_backward(&current, &block, &labels, true)
                .map_err(|e| if e.is_numeric() { Error::Diverged { epoch, batch: b } } else { e })?;
            let mut input_grads = bundle.input_grads.expect("requested");
            let mut reg = 0.0;
            if regularize {
                let mut rng = seed::rng(config.seed, "regularizer-baseline", (epoch as u64) << 32 | b as u64);
                let mut ctx = BaselineContext {
                    stats: stats.as_ref(),
                    model: Some(&current),
                    rng: Some(&mut rng),
                    projection: imp.projection,
                };
                let base = compute_baseline(imp.baseline, &block, &mut ctx)?;
                let iv = importance_vectors(&current, &block, &labels, &base, imp.steps_train, imp.one_point_at)?;
                reg = regularization_loss(&iv.vectors, imp.lambda)?;
                let rg = regularization_grad(&iv, imp.baseline, imp.lambda)?;
                for (g, r) in input_grads.data_mut().iter_mut().zip(rg.data()) {
                    *g += r;
                }
            }
            if !(bundle.loss + reg).is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            ce_sum += bundle.loss * rows.len() as f64;
            reg_sum += reg * rows.len() as f64;

            let mut grads: Vec<DenseMatrix> = current
                .embeddings
                .iter()
                .map(|t| DenseMatrix::zeros(t.rows(), d))
                .collect();
            for (s, row) in idx.chunks(f).enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    for (acc, &g) in grads[k].row_mut(v).iter_mut().zip(input_grads.field(s, k)) {
                        *acc += g;
                    }
                }
            }
            debug_assert_eq!(grads.len(), n_tables);
            grads.extend(bundle.param_grads);
            let mut params = current.all_params_mut();
            adam.update(&mut params, &grads);
        }

        let val = match evaluate(&current, val_set) {
            Ok(m) => m,
            Err(Error::SingleClass { logloss }) => Metrics { auc: 0.5, logloss },
            Err(e) => return Err(e),
        };
        let n = train_set.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            train_cross_entropy: ce_sum / n,
            train_regularizer: reg_sum / n,
            val_auc: val.auc,
            val_logloss: val.logloss,
        });
        if val.auc > best_auc {
            best_auc = val.auc;
            best = current.clone();
            history.best_epoch = Some(history.epochs.len() - 1);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((best, history))
}

/// Mean training cross-entropy of `model` over `dataset`.
pub fn mean_loss(model: &CtrModel, dataset: &TabularDataset) -> Result<f64> {
    let f = dataset.n_fields();
    let mut total = 0.0;
    for (chunk, labels) in dataset.indices.chunks(4096 * f).zip(dataset.labels.chunks(4096)) {
        let block = model.embed(chunk)?;
        total += model.per_sample_losses(&block, labels)?.iter().sum::<f64>();
    }
    Ok(total / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]), Some(0.5));
        assert_eq!(auc(&[0.8, 0.2, 0.6], &[1, 1, 0]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), None);
    }

    #[test]
    fn adam_single_step_closed_form() {
        let mut p = DenseMatrix::from_vec(1, 1, vec![0.5]).unwrap();
        let g = DenseMatrix::from_vec(1, 1, vec![0.2]).unwrap();
        let mut adam = Adam::new(&[(1, 1)], 0.01, 0.9, 0.999, 1e-8);
        adam.update(&mut [&mut p], std::slice::from_ref(&g));
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let want = 0.5 - 0.01 * 0.2 / (0.2 + 1e-8);
        assert!((p.get(0, 0) - want).abs() < 1e-15);

        adam.update(&mut [&mut p], &[g]);
        let m = 0.9 * 0.02 + 0.1 * 0.2;
        let v = 0.999 * 0.001 * 0.04 + 0.001 * 0.04;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let want2 = want - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.get(0, 0) - want2).abs() < 1e-15);
    }

    #[test]
    fn logloss_clamps() {
        let l = logloss(&[1.0, 0.0], &[0, 1]);
        assert!((l - (-(1e-7f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c = TrainConfig { patience: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            scores in proptest::collection::vec(-5.0f64..5.0, 4..40),
            seed_v in any::<u64>(),
        ) {
            let labels: Vec<u8> = (0..scores.len()).map(|i| ((seed_v >> (i % 64)) & 1) as u8).collect();
            if let Some(a) = auc(&scores, &labels) {
                let t: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
                prop_assert!((auc(&t, &labels).unwrap() - a).abs() < 1e-12);
                let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
                prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
