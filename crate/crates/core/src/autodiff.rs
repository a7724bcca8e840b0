//! Dense 64-bit containers and reverse-mode differentiation of the CTR model.
//!
//! The model family is a fixed composition (linear term, FM pairwise term,
//! ReLU tower), so the reverse pass is written out layer by layer over a
//! recorded forward trace instead of going through a general tape. Every
//! reduction over the batch runs in ascending sample order, which keeps
//! gradients bit-reproducible.
//!
//! ReLU has derivative 0 at exactly 0.

use crate::error::{Error, Result};
use crate::model::CtrModel;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "matrix entry {v} is not finite"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// Per-sample embedding blocks: `samples` blocks of `fields` vectors of
/// length `dim`, stored contiguously as `[sample][field][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    samples: usize,
    fields: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingBlock {
    pub fn zeros(samples: usize, fields: usize, dim: usize) -> Self {
        Self {
            samples,
            fields,
            dim,
            data: vec![0.0; samples * fields * dim],
        }
    }

    pub fn from_vec(samples: usize, fields: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != samples * fields * dim {
            return Err(Error::Shape(format!(
                "block {samples}x{fields}x{dim} needs {} entries, got {}",
                samples * fields * dim,
                data.len()
            )));
        }
        Ok(Self {
            samples,
            fields,
            dim,
            data,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn fields(&self) -> usize {
        self.fields
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Width of one flattened sample, `fields * dim`.
    pub fn width(&self) -> usize {
        self.fields * self.dim
    }

    pub fn same_shape(&self, other: &EmbeddingBlock) -> bool {
        self.samples == other.samples && self.fields == other.fields && self.dim == other.dim
    }

    pub fn check_same_shape(&self, other: &EmbeddingBlock) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "blocks {}x{}x{} and {}x{}x{} differ",
                self.samples, self.fields, self.dim, other.samples, other.fields, other.dim
            )))
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        let w = self.width();
        &self.data[s * w..(s + 1) * w]
    }

    pub fn sample_mut(&mut self, s: usize) -> &mut [f64] {
        let w = self.width();
        &mut self.data[s * w..(s + 1) * w]
    }

    pub fn field(&self, s: usize, f: usize) -> &[f64] {
        let start = (s * self.fields + f) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn field_mut(&mut self, s: usize, f: usize) -> &mut [f64] {
        let start = (s * self.fields + f) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// Copies the listed samples, in order, into a new block.
    pub fn gather(&self, samples: &[usize]) -> EmbeddingBlock {
        let mut data = Vec::with_capacity(samples.len() * self.width());
        for &s in samples {
            data.extend_from_slice(self.sample(s));
        }
        EmbeddingBlock {
            samples: samples.len(),
            fields: self.fields,
            dim: self.dim,
            data,
        }
    }

    /// Copy of `self` with field `f` of every sample taken from `other`.
    pub fn with_field_from(&self, f: usize, other: &EmbeddingBlock) -> Result<EmbeddingBlock> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for s in 0..self.samples {
            out.field_mut(s, f).copy_from_slice(other.field(s, f));
        }
        Ok(out)
    }
}

/// Anything that maps embedding blocks to per-sample logits and can pull a
/// per-sample cotangent on the logits back onto its inputs.
pub trait Differentiable {
    fn n_fields(&self) -> usize;

    fn embed_dim(&self) -> usize;

    fn logits(&self, block: &EmbeddingBlock) -> Result<Vec<f64>>;

    /// Runs the forward pass, asks `cotangent(sample, logit)` for the
    /// derivative of the objective with respect to each logit, and returns
    /// the logits together with the objective's gradient on the inputs.
    fn input_vjp(
        &self,
        block: &EmbeddingBlock,
        cotangent: &mut dyn FnMut(usize, f64) -> f64,
    ) -> Result<(Vec<f64>, EmbeddingBlock)>;

    fn check_block(&self, block: &EmbeddingBlock) -> Result<()> {
        if block.fields() != self.n_fields() || block.dim() != self.embed_dim() {
            return Err(Error::Shape(format!(
                "embedding block has {} fields of dim {}, model expects {} of dim {}",
                block.fields(),
                block.dim(),
                self.n_fields(),
                self.embed_dim()
            )));
        }
        Ok(())
    }

    /// Per-sample losses and the gradient of each sample's own loss with
    /// respect to that sample's embedding block (no batch averaging).
    fn per_sample_loss_grads(
        &self,
        block: &EmbeddingBlock,
        labels: &[u8],
    ) -> Result<(Vec<f64>, EmbeddingBlock)> {
        check_labels(labels, block.samples())?;
        let mut losses = vec![0.0; labels.len()];
        let (_, grads) = self.input_vjp(block, &mut |s, z| {
            let y = f64::from(labels[s]);
            losses[s] = bce_term(z, y);
            sigmoid(z) - y
        })?;
        Ok((losses, grads))
    }

    /// Per-sample losses without gradients.
    fn per_sample_losses(&self, block: &EmbeddingBlock, labels: &[u8]) -> Result<Vec<f64>> {
        check_labels(labels, block.samples())?;
        let z = self.logits(block)?;
        Ok(z.iter()
            .zip(labels)
            .map(|(&z, &y)| bce_term(z, f64::from(y)))
            .collect())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of logit `z` against `y`, in the overflow-free form
/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub(crate) fn check_labels(labels: &[u8], samples: usize) -> Result<()> {
    if labels.len() != samples {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            labels.len(),
            samples
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidArgument(format!("label {y} is not 0 or 1")));
    }
    Ok(())
}

fn ensure_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: layer.to_string(),
        })
    }
}

/// Loss and gradients of the mean batch cross-entropy.
///
/// `param_grads` lines up with [`CtrModel::predictor_params`]. Embedding
/// tables are not included: their gradient is the scatter of `input_grads`
/// onto the looked-up rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub param_grads: Vec<DenseMatrix>,
    pub input_grads: Option<EmbeddingBlock>,
}

/// Activations recorded on the forward pass.
pub(crate) struct Trace {
    pub logits: Vec<f64>,
    /// Input of each hidden layer, `samples x in_width`.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer, `samples x out_width`.
    pre_acts: Vec<Vec<f64>>,
    /// Output of the last hidden layer (or the raw input when there is none).
    tower_out: Vec<f64>,
}

pub(crate) fn forward(model: &CtrModel, block: &EmbeddingBlock) -> Result<Trace> {
    model.check_block(block)?;
    let n = block.samples();
    let width = block.width();
    let dim = block.dim();
    let fields = block.fields();
    let x0 = block.data();
    ensure_finite(x0, "input embeddings")?;

    let mut logits = vec![model.bias.get(0, 0); n];

    if let Some(w) = &model.linear {
        let w = w.data();
        for s in 0..n {
            logits[s] += dot(w, &x0[s * width..(s + 1) * width]);
        }
        ensure_finite(&logits, "linear term")?;
    }

    if model.arch.has_fm() {
        let mut sum = vec![0.0; dim];
        for (s, logit) in logits.iter_mut().enumerate() {
            sum.iter_mut().for_each(|v| *v = 0.0);
            let mut sq = 0.0;
            for f in 0..fields {
                let h = block.field(s, f);
                for k in 0..dim {
                    sum[k] += h[k];
                    sq += h[k] * h[k];
                }
            }
            *logit += 0.5 * (dot(&sum, &sum) - sq);
        }
        ensure_finite(&logits, "fm pairwise term")?;
    }

    let mut layer_inputs = Vec::new();
    let mut pre_acts = Vec::new();
    let mut tower_out = Vec::new();
    if let Some(head) = &model.head {
        let mut x = x0.to_vec();
        let mut in_w = width;
        for (l, layer) in model.layers.iter().enumerate() {
            let out_w = layer.weight.rows();
            let mut z = vec![0.0; n * out_w];
            for s in 0..n {
                let xs = &x[s * in_w..(s + 1) * in_w];
                for o in 0..out_w {
                    z[s * out_w + o] = dot(layer.weight.row(o), xs) + layer.bias.get(o, 0);
                }
            }
            ensure_finite(&z, &format!("hidden layer {}", l + 1))?;
            let a: Vec<f64> = z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            layer_inputs.push(x);
            pre_acts.push(z);
            x = a;
            in_w = out_w;
        }
        let h = head.data();
        for s in 0..n {
            logits[s] += dot(h, &x[s * in_w..(s + 1) * in_w]);
        }
        ensure_finite(&logits, "output head")?;
        tower_out = x;
    }

    Ok(Trace {
        logits,
        layer_inputs,
        pre_acts,
        tower_out,
    })
}

/// Reverse pass for cotangents `upstream[s] = dObjective/dlogit_s`.
pub(crate) fn backward(
    model: &CtrModel,
    block: &EmbeddingBlock,
    trace: &Trace,
    upstream: &[f64],
    want_params: bool,
) -> Result<(Vec<DenseMatrix>, EmbeddingBlock)> {
    let n = block.samples();
    let width = block.width();
    let dim = block.dim();
    let fields = block.fields();
    let x0 = block.data();
    let mut dx0 = vec![0.0; n * width];

    let mut g_linear = None;
    if let Some(w) = &model.linear {
        let mut g = vec![0.0; width];
        for s in 0..n {
            let u = upstream[s];
            let xs = &x0[s * width..(s + 1) * width];
            if want_params {
                axpy(u, xs, &mut g);
            }
            axpy(u, w.data(), &mut dx0[s * width..(s + 1) * width]);
        }
        g_linear = Some(DenseMatrix {
            rows: 1,
            cols: width,
            data: g,
        });
    }

    if model.arch.has_fm() {
        let mut sum = vec![0.0; dim];
        for s in 0..n {
            sum.iter_mut().for_each(|v| *v = 0.0);
            for f in 0..fields {
                axpy(1.0, block.field(s, f), &mut sum);
            }
            let u = upstream[s];
            for f in 0..fields {
                let h = block.field(s, f);
                let d = &mut dx0[(s * fields + f) * dim..(s * fields + f + 1) * dim];
                for k in 0..dim {
                    d[k] += u * (sum[k] - h[k]);
                }
            }
        }
    }

    let mut g_layers: Vec<(DenseMatrix, DenseMatrix)> = Vec::new();
    let mut g_head = None;
    if let Some(head) = &model.head {
        let last_w = head.cols();
        let mut g_h = vec![0.0; last_w];
        let mut dx = vec![0.0; n * last_w];
        for s in 0..n {
            let u = upstream[s];
            if want_params {
                axpy(u, &trace.tower_out[s * last_w..(s + 1) * last_w], &mut g_h);
            }
            axpy(u, head.data(), &mut dx[s * last_w..(s + 1) * last_w]);
        }
        g_head = Some(DenseMatrix {
            rows: 1,
            cols: last_w,
            data: g_h,
        });

        for (l, layer) in model.layers.iter().enumerate().rev() {
            let (out_w, in_w) = layer.weight.shape();
            let z = &trace.pre_acts[l];
            let x = &trace.layer_inputs[l];
            let mut gw = DenseMatrix::zeros(out_w, in_w);
            let mut gb = DenseMatrix::zeros(out_w, 1);
            let mut dx_prev = vec![0.0; n * in_w];
            for s in 0..n {
                let xs = &x[s * in_w..(s + 1) * in_w];
                let dxs = &mut dx_prev[s * in_w..(s + 1) * in_w];
                for o in 0..out_w {
                    let dz = if z[s * out_w + o] > 0.0 {
                        dx[s * out_w + o]
                    } else {
                        0.0
                    };
                    if dz == 0.0 {
                        continue;
                    }
                    if want_params {
                        axpy(dz, xs, gw.row_mut(o));
                        gb.data[o] += dz;
                    }
                    axpy(dz, layer.weight.row(o), dxs);
                }
            }
            ensure_finite(&dx_prev, &format!("hidden layer {} (backward)", l + 1))?;
            g_layers.push((gw, gb));
            dx = dx_prev;
        }
        g_layers.reverse();
        for (a, b) in dx0.iter_mut().zip(&dx) {
            *a += b;
        }
    }
    ensure_finite(&dx0, "input gradient")?;

    let mut params = Vec::new();
    if want_params {
        if let Some(g) = g_linear {
            params.push(g);
        }
        for (gw, gb) in g_layers {
            params.push(gw);
            params.push(gb);
        }
        if let Some(g) = g_head {
            params.push(g);
        }
        let gbias: f64 = upstream.iter().sum();
        params.push(DenseMatrix {
            rows: 1,
            cols: 1,
            data: vec![gbias],
        });
    }
    Ok((params, EmbeddingBlock::from_vec(n, fields, dim, dx0)?))
}

/// Mean binary cross-entropy of the batch with exact reverse-mode gradients
/// for the predictor parameters and, on request, the input embeddings.
pub fn forward_backward(
    model: &CtrModel,
    embeddings: &EmbeddingBlock,
    labels: &[u8],
    want_input_grads: bool,
) -> Result<GradientBundle> {
    check_labels(labels, embeddings.samples())?;
    let n = embeddings.samples();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let trace = forward(model, embeddings)?;
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut upstream = vec![0.0; n];
    for s in 0..n {
        let y = f64::from(labels[s]);
        let z = trace.logits[s];
        loss += bce_term(z, y);
        upstream[s] = (sigmoid(z) - y) * scale;
    }
    loss *= scale;
    ensure_finite(&[loss], "loss")?;
    let (param_grads, input_grads) = backward(model, embeddings, &trace, &upstream, true)?;
    Ok(GradientBundle {
        loss,
        param_grads,
        input_grads: want_input_grads.then_some(input_grads),
    })
}

fn mean_loss(model: &CtrModel, block: &EmbeddingBlock, labels: &[u8]) -> Result<f64> {
    let losses = model.per_sample_losses(block, labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Central-difference derivative of a scalar map.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step {step} must be > 0")));
    }
    Ok((f(x + step) - f(x - step)) / (2.0 * step))
}

/// Central-difference estimate of everything [`forward_backward`] returns.
/// Input gradients are always included.
pub fn finite_difference_gradients(
    model: &CtrModel,
    embeddings: &EmbeddingBlock,
    labels: &[u8],
    step: f64,
) -> Result<GradientBundle> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step {step} must be > 0")));
    }
    let loss = mean_loss(model, embeddings, labels)?;

    let mut probe = model.clone();
    let n_params = model.predictor_params().len();
    let mut param_grads = Vec::with_capacity(n_params);
    for p in 0..n_params {
        let (rows, cols) = model.predictor_params()[p].shape();
        let mut g = DenseMatrix::zeros(rows, cols);
        for i in 0..rows * cols {
            let orig = model.predictor_params()[p].data[i];
            probe.predictor_params_mut()[p].data[i] = orig + step;
            let up = mean_loss(&probe, embeddings, labels)?;
            probe.predictor_params_mut()[p].data[i] = orig - step;
            let down = mean_loss(&probe, embeddings, labels)?;
            probe.predictor_params_mut()[p].data[i] = orig;
            g.data[i] = (up - down) / (2.0 * step);
        }
        param_grads.push(g);
    }

    let mut shifted = embeddings.clone();
    let mut input = EmbeddingBlock::zeros(embeddings.samples(), embeddings.fields(), embeddings.dim());
    for i in 0..embeddings.data().len() {
        let orig = embeddings.data()[i];
        shifted.data[i] = orig + step;
        let up = mean_loss(model, &shifted, labels)?;
        shifted.data[i] = orig - step;
        let down = mean_loss(model, &shifted, labels)?;
        shifted.data[i] = orig;
        input.data[i] = (up - down) / (2.0 * step);
    }

    Ok(GradientBundle {
        loss,
        param_grads,
        input_grads: Some(input),
    })
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

impl Differentiable for CtrModel {
    fn n_fields(&self) -> usize {
        self.schema.fields.len()
    }

    fn embed_dim(&self) -> usize {
        self.schema.embed_dim
    }

    fn logits(&self, block: &EmbeddingBlock) -> Result<Vec<f64>> {
        Ok(forward(self, block)?.logits)
    }

    fn input_vjp(
        &self,
        block: &EmbeddingBlock,
        cotangent: &mut dyn FnMut(usize, f64) -> f64,
    ) -> Result<(Vec<f64>, EmbeddingBlock)> {
        let trace = forward(self, block)?;
        let upstream: Vec<f64> = trace
            .logits
            .iter()
            .enumerate()
            .map(|(s, &z)| cotangent(s, z))
            .collect();
        let (_, grads) = backward(self, block, &trace, &upstream, false)?;
        Ok((trace.logits, grads))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
