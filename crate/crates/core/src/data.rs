//! Categorical datasets: CSV ingestion, vocabularies, 8:1:1 splitting and a
//! synthetic generator whose label depends only on a planted set of fields.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::model::{Field, FieldSchema};
use crate::seed;

/// Category-to-index map for one field. Index 0 is out-of-vocabulary; seen
/// categories are numbered from 1 in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    values: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn insert(&mut self, value: &str) -> usize {
        if let Some(&i) = self.index.get(value) {
            return i;
        }
        self.values.push(value.to_string());
        let i = self.values.len();
        self.index.insert(value.to_string(), i);
        i
    }

    /// Index of `value`, or 0 when unseen.
    pub fn lookup(&self, value: &str) -> usize {
        self.index.get(value).copied().unwrap_or(0)
    }

    /// Category stored at `index`, `None` for the OOV slot.
    pub fn value(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.values.get(i)).map(String::as_str)
    }

    /// Number of embedding rows needed, OOV included.
    pub fn size(&self) -> usize {
        self.values.len() + 1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    /// Fields that carry label signal, when known (synthetic data).
    pub planted: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub fields: Vec<Field>,
    /// Row-major, `fields.len()` indices per row.
    pub indices: Vec<usize>,
    pub labels: Vec<u8>,
    pub provenance: Provenance,
}

impl TabularDataset {
    pub fn new(
        fields: Vec<Field>,
        indices: Vec<usize>,
        labels: Vec<u8>,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = Self {
            fields,
            indices,
            labels,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fields.len();
        if f == 0 {
            return Err(Error::Data("dataset has no fields".into()));
        }
        if self.indices.len() != f * self.labels.len() {
            return Err(Error::Data(format!(
                "{} indices for {} rows of {f} fields",
                self.indices.len(),
                self.labels.len()
            )));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y > 1) {
            return Err(Error::Data(format!("label {y} is not 0 or 1")));
        }
        for row in self.indices.chunks(f) {
            for (k, &idx) in row.iter().enumerate() {
                if idx >= self.fields[k].vocab_size {
                    return Err(Error::IndexOutOfRange {
                        field: self.fields[k].name.clone(),
                        index: idx,
                        vocab_size: self.fields[k].vocab_size,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        let f = self.fields.len();
        &self.indices[i * f..(i + 1) * f]
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    pub fn schema(&self, embed_dim: usize) -> Result<FieldSchema> {
        let s = FieldSchema {
            fields: self.fields.clone(),
            embed_dim,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn positive_rate(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().map(|&y| f64::from(y)).sum::<f64>() / self.labels.len() as f64
    }

    /// Rows `rows`, in the given order.
    pub fn subset(&self, rows: &[usize]) -> TabularDataset {
        let mut indices = Vec::with_capacity(rows.len() * self.n_fields());
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            indices.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        TabularDataset {
            fields: self.fields.clone(),
            indices,
            labels,
            provenance: self.provenance.clone(),
        }
    }

    /// Columns `keep`, in the given order.
    pub fn select_fields(&self, keep: &[usize]) -> Result<TabularDataset> {
        if keep.is_empty() {
            return Err(Error::InvalidArgument("no fields selected".into()));
        }
        let f = self.n_fields();
        if let Some(&k) = keep.iter().find(|&&k| k >= f) {
            return Err(Error::InvalidArgument(format!("field index {k} out of range")));
        }
        let mut indices = Vec::with_capacity(self.len() * keep.len());
        for i in 0..self.len() {
            let row = self.row(i);
            indices.extend(keep.iter().map(|&k| row[k]));
        }
        let planted = self.provenance.planted.as_ref().map(|p| {
            keep.iter()
                .enumerate()
                .filter(|(_, k)| p.contains(k))
                .map(|(i, _)| i)
                .collect()
        });
        Ok(TabularDataset {
            fields: keep.iter().map(|&k| self.fields[k].clone()).collect(),
            indices,
            labels: self.labels.clone(),
            provenance: Provenance {
                source: format!("{} [fields {:?}]", self.provenance.source, keep),
                seed: self.provenance.seed,
                planted,
            },
        })
    }

    /// Versioned binary snapshot: schema, indices, labels and provenance.
    pub fn write_snapshot(&self, mut w: impl Write) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&(&self.fields, &self.provenance))?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for &i in &self.indices {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
        w.write_all(&self.labels)?;
        Ok(())
    }

    pub fn read_snapshot(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Data("not a dataset snapshot".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != SNAPSHOT_VERSION {
            return Err(Error::Data(format!("unsupported snapshot version {version}")));
        }
        r.read_exact(&mut b8)?;
        let mut meta = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut meta)?;
        let (fields, provenance): (Vec<Field>, Provenance) = serde_json::from_slice(&meta)?;
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut indices = Vec::with_capacity(n * fields.len());
        for _ in 0..n * fields.len() {
            r.read_exact(&mut b4)?;
            indices.push(u32::from_le_bytes(b4) as usize);
        }
        let mut labels = vec![0u8; n];
        r.read_exact(&mut labels)?;
        Self::new(fields, indices, labels, provenance)
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_snapshot(bytes.as_slice())
    }

    /// Writes the dataset as CSV of raw indices with a trailing `label` column.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = self.field_names();
        header.push("label".into());
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"FSDS";
const SNAPSHOT_VERSION: u32 = 1;

/// Raw string table read from CSV, before vocabularies are fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub columns: Vec<String>,
    /// Row-major, `columns.len()` values per row.
    pub values: Vec<String>,
    pub labels: Vec<u8>,
    pub source: String,
}

impl CsvTable {
    pub fn read(path: impl AsRef<Path>, label_column: &str) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::from_reader(file, label_column, &path.display().to_string())
    }

    pub fn from_reader(r: impl Read, label_column: &str, source: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(r);
        let mut records = rd.records();
        let header = match records.next() {
            Some(h) => h?,
            None => return Err(Error::Data("missing header row".into())),
        };
        let header: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
        if header.iter().all(String::is_empty) {
            return Err(Error::Data("missing header row".into()));
        }
        let label_pos = header
            .iter()
            .position(|h| h == label_column)
            .ok_or_else(|| Error::Data(format!("label column `{label_column}` not in header")))?;
        let columns: Vec<String> = header
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != label_pos)
            .map(|(_, h)| h.clone())
            .collect();
        if columns.is_empty() {
            return Err(Error::Data("no feature columns".into()));
        }

        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in records.enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Data(format!(
                    "row {} has {} fields, header has {}",
                    line + 2,
                    rec.len(),
                    header.len()
                )));
            }
            for (i, v) in rec.iter().enumerate() {
                if i == label_pos {
                    labels.push(match v.trim() {
                        "0" => 0,
                        "1" => 1,
                        other => {
                            return Err(Error::Data(format!(
                                "row {}: label `{other}` is not 0 or 1",
                                line + 2
                            )))
                        }
                    });
                } else {
                    values.push(v.to_string());
                }
            }
        }
        Ok(Self {
            columns,
            values,
            labels,
            source: source.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn value(&self, row: usize, col: usize) -> &str {
        &self.values[row * self.columns.len() + col]
    }

    /// Fits one vocabulary per column over `rows`, visited in file order.
    pub fn fit_vocabularies(&self, rows: &[usize]) -> Vec<Vocabulary> {
        let mut sorted = rows.to_vec();
        sorted.sort_unstable();
        let mut vocabs = vec![Vocabulary::default(); self.columns.len()];
        for &r in &sorted {
            for (c, v) in vocabs.iter_mut().enumerate() {
                v.insert(self.value(r, c));
            }
        }
        vocabs
    }

    /// Encodes `rows` (in the given order) with fitted vocabularies.
    pub fn encode(&self, vocabs: &[Vocabulary], rows: &[usize]) -> Result<TabularDataset> {
        if vocabs.len() != self.columns.len() {
            return Err(Error::Shape("one vocabulary per column".into()));
        }
        let fields = self
            .columns
            .iter()
            .zip(vocabs)
            .map(|(name, v)| Field {
                name: name.clone(),
                vocab_size: v.size(),
            })
            .collect();
        let mut indices = Vec::with_capacity(rows.len() * self.columns.len());
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            for (c, v) in vocabs.iter().enumerate() {
                indices.push(v.lookup(self.value(r, c)));
            }
            labels.push(self.labels[r]);
        }
        TabularDataset::new(
            fields,
            indices,
            labels,
            Provenance {
                source: self.source.clone(),
                seed: None,
                planted: None,
            },
        )
    }
}

/// Loads a CSV and fits vocabularies over every row.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<TabularDataset> {
    let table = CsvTable::read(path, label_column)?;
    let rows: Vec<usize> = (0..table.len()).collect();
    let vocabs = table.fit_vocabularies(&rows);
    table.encode(&vocabs, &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: TabularDataset,
    pub validation: TabularDataset,
    pub test: TabularDataset,
}

/// Loads a CSV, splits it 8:1:1 and fits vocabularies on the training rows
/// only; validation and test categories unseen in training map to 0.
pub fn load_csv_splits(path: impl AsRef<Path>, label_column: &str, seed: u64) -> Result<Splits> {
    let table = CsvTable::read(path, label_column)?;
    let (train, val, test) = split_indices(table.len(), seed)?;
    let vocabs = table.fit_vocabularies(&train);
    let mut out = Splits {
        train: table.encode(&vocabs, &train)?,
        validation: table.encode(&vocabs, &val)?,
        test: table.encode(&vocabs, &test)?,
    };
    for ds in [&mut out.train, &mut out.validation, &mut out.test] {
        ds.provenance.seed = Some(seed);
    }
    Ok(out)
}

/// Seeded shuffle of `0..n`, cut into `floor(0.8n)`, `floor(0.1n)` and the
/// remainder.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 rows to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "split", 0));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok((order, val, test))
}

pub fn split_dataset(dataset: &TabularDataset, seed: u64) -> Result<Splits> {
    let (train, val, test) = split_indices(dataset.len(), seed)?;
    Ok(Splits {
        train: dataset.subset(&train),
        validation: dataset.subset(&val),
        test: dataset.subset(&test),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_rows: usize,
    pub n_fields: usize,
    /// Field indices that enter the label expression.
    pub planted: Vec<usize>,
    /// Categories per field, excluding the OOV slot.
    pub vocab_size: usize,
    pub target_positive_rate: f64,
    #[serde(default)]
    pub interaction_pairs: Vec<(usize, usize)>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_fields == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidArgument(
                "n_rows, n_fields and vocab_size must be >= 1".into(),
            ));
        }
        if let Some(&p) = self.planted.iter().find(|&&p| p >= self.n_fields) {
            return Err(Error::InvalidArgument(format!("planted field {p} out of range")));
        }
        for &(j, k) in &self.interaction_pairs {
            if j >= self.n_fields || k >= self.n_fields {
                return Err(Error::InvalidArgument(format!(
                    "interaction pair ({j}, {k}) out of range"
                )));
            }
            if !self.planted.contains(&j) || !self.planted.contains(&k) {
                return Err(Error::InvalidArgument(format!(
                    "interaction pair ({j}, {k}) must use planted fields"
                )));
            }
        }
        if !(self.target_positive_rate > 0.0 && self.target_positive_rate < 1.0) {
            return Err(Error::InvalidArgument(
                "target_positive_rate must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Label model of a synthetic dataset: per-category weights for planted
/// fields and per-category-pair weights for interaction pairs.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    spec: SyntheticSpec,
    /// `weights[p][v]` for the p-th planted field and category index `v`.
    weights: Vec<Vec<f64>>,
    /// Flattened `(vocab+1)^2` table per interaction pair.
    pair_weights: Vec<Vec<f64>>,
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let v = spec.vocab_size + 1;
        let mut rng = seed::rng(spec.seed, "synthetic-weights", 0);
        let weights = spec
            .planted
            .iter()
            .map(|_| (0..v).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let pair_weights = spec
            .interaction_pairs
            .iter()
            .map(|_| (0..v * v).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Ok(Self {
            spec,
            weights,
            pair_weights,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Label logit of each row, without the intercept.
    pub fn label_logits(&self, indices: &[usize]) -> Vec<f64> {
        let f = self.spec.n_fields;
        let v = self.spec.vocab_size + 1;
        indices
            .chunks(f)
            .map(|row| {
                let mut z = 0.0;
                for (p, &field) in self.spec.planted.iter().enumerate() {
                    z += self.weights[p][row[field]];
                }
                for (q, &(j, k)) in self.spec.interaction_pairs.iter().enumerate() {
                    z += self.pair_weights[q][row[j] * v + row[k]];
                }
                z
            })
            .collect()
    }

    pub fn generate(&self) -> Result<TabularDataset> {
        let spec = &self.spec;
        let f = spec.n_fields;
        let n = spec.n_rows;
        let mut frng = seed::rng(spec.seed, "synthetic-features", 0);
        let indices: Vec<usize> = (0..n * f)
            .map(|_| frng.random_range(1..=spec.vocab_size))
            .collect();
        let z = self.label_logits(&indices);
        let mut lrng = seed::rng(spec.seed, "synthetic-labels", 0);
        let u: Vec<f64> = (0..n).map(|_| lrng.random::<f64>()).collect();

        let rate = |b0: f64| -> f64 {
            z.iter()
                .zip(&u)
                .filter(|(&z, &u)| u < sigmoid(b0 + z))
                .count() as f64
                / n as f64
        };
        let target = spec.target_positive_rate;
        let (mut lo, mut hi) = (-60.0f64, 60.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if rate(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let b0 = if (rate(lo) - target).abs() <= (rate(hi) - target).abs() {
            lo
        } else {
            hi
        };
        if (rate(b0) - target).abs() > 0.02 {
            return Err(Error::InfeasibleRate { target });
        }
        let labels = z
            .iter()
            .zip(&u)
            .map(|(&z, &u)| u8::from(u < sigmoid(b0 + z)))
            .collect();
        let fields = (0..f)
            .map(|i| Field {
                name: format!("f{i:02}"),
                vocab_size: spec.vocab_size + 1,
            })
            .collect();
        let mut planted = spec.planted.clone();
        planted.sort_unstable();
        planted.dedup();
        TabularDataset::new(
            fields,
            indices,
            labels,
            Provenance {
                source: format!(
                    "synthetic n={} F={} vocab={} rate={}",
                    n, f, spec.vocab_size, target
                ),
                seed: Some(spec.seed),
                planted: Some(planted),
            },
        )
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TabularDataset> {
    SyntheticGenerator::new(spec.clone())?.generate()
}
