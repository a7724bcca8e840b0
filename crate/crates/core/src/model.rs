//! CTR predictors over categorical field embeddings.
//!
//! A model is an embedding table per field plus a predictor assembled from
//! up to three parts, summed into one logit with a scalar bias:
//!
//! * a linear term `w . E` over the flattened block,
//! * the FM pairwise term `sum_{j<k} <h_j, h_k>`,
//! * a ReLU tower followed by a linear head.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_term, check_labels, Differentiable, DenseMatrix, EmbeddingBlock};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    /// Number of embedding rows, including the out-of-vocabulary row 0.
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub fields: Vec<Field>,
    pub embed_dim: usize,
}

impl FieldSchema {
    pub fn new(fields: Vec<(String, usize)>, embed_dim: usize) -> Result<Self> {
        let schema = Self {
            fields: fields
                .into_iter()
                .map(|(name, vocab_size)| Field { name, vocab_size })
                .collect(),
            embed_dim,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be >= 1".into()));
        }
        if self.fields.is_empty() {
            return Err(Error::InvalidArgument("schema has no fields".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.fields {
            if f.vocab_size == 0 {
                return Err(Error::InvalidArgument(format!(
                    "field `{}` has vocab_size 0",
                    f.name
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate field name `{}`",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    /// Schema restricted to `keep`, in the given order.
    pub fn select(&self, keep: &[usize]) -> Result<FieldSchema> {
        let mut fields = Vec::with_capacity(keep.len());
        for &k in keep {
            let f = self.fields.get(k).ok_or_else(|| {
                Error::InvalidArgument(format!("field index {k} out of range"))
            })?;
            fields.push(f.clone());
        }
        let s = FieldSchema {
            fields,
            embed_dim: self.embed_dim,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Linear,
    Fm,
    Mlp,
    FmMlp,
}

impl Arch {
    pub fn has_linear(self) -> bool {
        matches!(self, Arch::Linear | Arch::Fm | Arch::FmMlp)
    }

    pub fn has_fm(self) -> bool {
        matches!(self, Arch::Fm | Arch::FmMlp)
    }

    pub fn has_mlp(self) -> bool {
        matches!(self, Arch::Mlp | Arch::FmMlp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Linear => "linear",
            Arch::Fm => "fm",
            Arch::Mlp => "mlp",
            Arch::FmMlp => "fm_mlp",
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Arch::Linear),
            "fm" => Ok(Arch::Fm),
            "mlp" => Ok(Arch::Mlp),
            "fm_mlp" | "fm+mlp" => Ok(Arch::FmMlp),
            other => Err(Error::InvalidArgument(format!("unknown arch `{other}`"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hidden ReLU layer: `weight` is `out x in`, `bias` is `out x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrModel {
    pub schema: FieldSchema,
    pub arch: Arch,
    pub hidden_dims: Vec<usize>,
    /// One `vocab_size x embed_dim` table per field.
    pub embeddings: Vec<DenseMatrix>,
    /// `1 x (F*d)`, present when the arch has a linear term.
    pub linear: Option<DenseMatrix>,
    pub layers: Vec<DenseLayer>,
    /// `1 x last_width`, present when the arch has a tower.
    pub head: Option<DenseMatrix>,
    /// `1 x 1` output bias.
    pub bias: DenseMatrix,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("shape")
}

impl CtrModel {
    /// Fresh model: Xavier-uniform predictor weights, zero biases, and
    /// embeddings drawn from U(-0.01, 0.01).
    pub fn new(schema: FieldSchema, arch: Arch, hidden_dims: &[usize], seed: u64) -> Result<Self> {
        schema.validate()?;
        if hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        let d = schema.embed_dim;
        let width = schema.len() * d;

        let mut erng = seed::rng(seed, "embeddings", 0);
        let embeddings = schema
            .fields
            .iter()
            .map(|f| {
                let data = (0..f.vocab_size * d)
                    .map(|_| erng.random_range(-0.01..0.01))
                    .collect();
                DenseMatrix::from_vec(f.vocab_size, d, data).expect("shape")
            })
            .collect();

        let mut wrng = seed::rng(seed, "weights", 0);
        let linear = arch.has_linear().then(|| xavier(&mut wrng, 1, width));
        let mut layers = Vec::new();
        let mut head = None;
        let hidden = if arch.has_mlp() { hidden_dims.to_vec() } else { Vec::new() };
        if arch.has_mlp() {
            let mut in_w = width;
            for &out_w in &hidden {
                layers.push(DenseLayer {
                    weight: xavier(&mut wrng, out_w, in_w),
                    bias: DenseMatrix::zeros(out_w, 1),
                });
                in_w = out_w;
            }
            head = Some(xavier(&mut wrng, 1, in_w));
        }

        Ok(Self {
            schema,
            arch,
            hidden_dims: hidden,
            embeddings,
            linear,
            layers,
            head,
            bias: DenseMatrix::zeros(1, 1),
        })
    }

    pub fn bias_value(&self) -> f64 {
        self.bias.get(0, 0)
    }

    /// Predictor parameters in a fixed order: linear, then (weight, bias)
    /// per hidden layer, then head, then the output bias.
    pub fn predictor_params(&self) -> Vec<&DenseMatrix> {
        let mut out = Vec::new();
        if let Some(l) = &self.linear {
            out.push(l);
        }
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        if let Some(h) = &self.head {
            out.push(h);
        }
        out.push(&self.bias);
        out
    }

    pub fn predictor_params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = Vec::new();
        if let Some(l) = &mut self.linear {
            out.push(l);
        }
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out.push(&mut self.bias);
        out
    }

    /// Embedding tables followed by predictor parameters.
    pub fn all_params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = self.embeddings.iter_mut().collect();
        if let Some(l) = &mut self.linear {
            out.push(l);
        }
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out.push(&mut self.bias);
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.schema.validate()?;
        let d = self.schema.embed_dim;
        let width = self.schema.len() * d;
        if self.embeddings.len() != self.schema.len() {
            return Err(Error::Shape("one embedding table per field".into()));
        }
        for (t, f) in self.embeddings.iter().zip(&self.schema.fields) {
            if t.shape() != (f.vocab_size, d) {
                return Err(Error::Shape(format!("embedding table of `{}`", f.name)));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    layer: format!("embedding table of `{}`", f.name),
                });
            }
        }
        if self.arch.has_linear() != self.linear.is_some() {
            return Err(Error::Shape("linear term presence does not match arch".into()));
        }
        if let Some(l) = &self.linear {
            if l.shape() != (1, width) {
                return Err(Error::Shape("linear weight must be 1 x F*d".into()));
            }
        }
        if self.arch.has_mlp() != self.head.is_some() {
            return Err(Error::Shape("tower presence does not match arch".into()));
        }
        let mut in_w = width;
        for (i, layer) in self.layers.iter().enumerate() {
            let out_w = self.hidden_dims.get(i).copied().unwrap_or(0);
            if layer.weight.shape() != (out_w, in_w) || layer.bias.shape() != (out_w, 1) {
                return Err(Error::Shape(format!("hidden layer {}", i + 1)));
            }
            in_w = out_w;
        }
        if self.layers.len() != self.hidden_dims.len() {
            return Err(Error::Shape("hidden_dims does not match layers".into()));
        }
        if let Some(h) = &self.head {
            if h.shape() != (1, in_w) {
                return Err(Error::Shape("head must be 1 x last width".into()));
            }
        }
        if self.bias.shape() != (1, 1) {
            return Err(Error::Shape("bias must be 1 x 1".into()));
        }
        for p in self.predictor_params() {
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    layer: "predictor parameters".into(),
                });
            }
        }
        Ok(())
    }

    /// Embedding lookup. `indices` is row-major, `F` entries per sample.
    pub fn embed(&self, indices: &[usize]) -> Result<EmbeddingBlock> {
        let f = self.schema.len();
        let d = self.schema.embed_dim;
        if indices.len() % f != 0 {
            return Err(Error::Shape(format!(
                "{} indices is not a multiple of {f} fields",
                indices.len()
            )));
        }
        let n = indices.len() / f;
        let mut data = Vec::with_capacity(n * f * d);
        for row in indices.chunks(f) {
            for (k, &idx) in row.iter().enumerate() {
                let field = &self.schema.fields[k];
                if idx >= field.vocab_size {
                    return Err(Error::IndexOutOfRange {
                        field: field.name.clone(),
                        index: idx,
                        vocab_size: field.vocab_size,
                    });
                }
                data.extend_from_slice(self.embeddings[k].row(idx));
            }
        }
        EmbeddingBlock::from_vec(n, f, d, data)
    }

    pub fn predict_logit(&self, embeddings: &EmbeddingBlock) -> Result<Vec<f64>> {
        self.logits(embeddings)
    }

    /// Click probabilities for rows of indices.
    pub fn predict_proba(&self, indices: &[usize]) -> Result<Vec<f64>> {
        let block = self.embed(indices)?;
        Ok(self
            .logits(&block)?
            .into_iter()
            .map(crate::autodiff::sigmoid)
            .collect())
    }

    /// Serializes to the versioned text format. Floats are written in their
    /// shortest round-trip decimal form, so reloading is bit-exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "fieldsel-model v1");
        let _ = writeln!(out, "arch {}", self.arch);
        let _ = writeln!(out, "embed_dim {}", self.schema.embed_dim);
        let hidden: Vec<String> = self.hidden_dims.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(out, "hidden {}", hidden.join(" "));
        let _ = writeln!(out, "fields {}", self.schema.len());
        for f in &self.schema.fields {
            let _ = writeln!(out, "field {} {}", f.vocab_size, escape(&f.name));
        }
        let mut put = |name: &str, m: &DenseMatrix| {
            let _ = writeln!(out, "matrix {name} {} {}", m.rows(), m.cols());
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        };
        for (k, t) in self.embeddings.iter().enumerate() {
            put(&format!("embedding.{k}"), t);
        }
        if let Some(l) = &self.linear {
            put("linear", l);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            put(&format!("hidden.{i}.weight"), &layer.weight);
            put(&format!("hidden.{i}.bias"), &layer.bias);
        }
        if let Some(h) = &self.head {
            put("head", h);
        }
        put("bias", &self.bias);
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("unexpected end of file, expected {what}")))
        };
        if next("header")? != "fieldsel-model v1" {
            return Err(Error::Format("unsupported header".into()));
        }
        let arch: Arch = keyed(next("arch")?, "arch")?.parse()?;
        let embed_dim: usize = parse_num(keyed(next("embed_dim")?, "embed_dim")?)?;
        let hidden_line = next("hidden")?;
        let hidden_dims: Vec<usize> = hidden_line
            .strip_prefix("hidden")
            .ok_or_else(|| Error::Format("expected `hidden`".into()))?
            .split_whitespace()
            .map(parse_num)
            .collect::<Result<_>>()?;
        let n_fields: usize = parse_num(keyed(next("fields")?, "fields")?)?;
        let mut fields = Vec::with_capacity(n_fields);
        for _ in 0..n_fields {
            let rest = keyed(next("field")?, "field")?;
            let (vocab, name) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Format("malformed field line".into()))?;
            fields.push(Field {
                name: unescape(name)?,
                vocab_size: parse_num(vocab)?,
            });
        }
        let schema = FieldSchema { fields, embed_dim };
        schema.validate()?;

        let mut read_matrix = |expect: &str| -> Result<DenseMatrix> {
            let head = next("matrix")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "matrix" || parts[1] != expect {
                return Err(Error::Format(format!("expected matrix `{expect}`, got `{head}`")));
            }
            let rows: usize = parse_num(parts[2])?;
            let cols: usize = parse_num(parts[3])?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next("matrix row")?;
                let before = data.len();
                for tok in line.split_whitespace() {
                    data.push(parse_num::<f64>(tok)?);
                }
                if data.len() - before != cols {
                    return Err(Error::Format(format!("row of `{expect}` has wrong width")));
                }
            }
            DenseMatrix::from_vec(rows, cols, data)
        };

        let embeddings = (0..n_fields)
            .map(|k| read_matrix(&format!("embedding.{k}")))
            .collect::<Result<Vec<_>>>()?;
        let linear = arch.has_linear().then(|| read_matrix("linear")).transpose()?;
        let mut layers = Vec::new();
        if arch.has_mlp() {
            for i in 0..hidden_dims.len() {
                let weight = read_matrix(&format!("hidden.{i}.weight"))?;
                let bias = read_matrix(&format!("hidden.{i}.bias"))?;
                layers.push(DenseLayer { weight, bias });
            }
        }
        let head = arch.has_mlp().then(|| read_matrix("head")).transpose()?;
        let bias = read_matrix("bias")?;
        if next("end")? != "end" {
            return Err(Error::Format("missing `end`".into()));
        }
        let model = CtrModel {
            schema,
            arch,
            hidden_dims,
            embeddings,
            linear,
            layers,
            head,
            bias,
        };
        model.check_invariants()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn keyed<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::Format(format!("expected `{key}`, got `{line}`")))
}

fn parse_num<T: FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad number `{s}`")))
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('\\') => out.push('\\'),
                Some('n') => out.push('\n'),
                _ => return Err(Error::Format("bad escape in field name".into())),
            }
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

/// Mean binary cross-entropy of logits against 0/1 labels.
pub fn bce_loss(logits: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(labels, logits.len())?;
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| bce_term(z, f64::from(y)))
        .sum();
    Ok(sum / logits.len() as f64)
}
