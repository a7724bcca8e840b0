use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fieldsel_core::data::{
    generate_synthetic, load_csv_splits, split_dataset, Splits, SyntheticSpec, TabularDataset,
};
use fieldsel_core::importance::ImportanceConfig;
use fieldsel_core::pipeline::{ModelConfig, SelectionConfig};
use fieldsel_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { path: PathBuf, label: String },
    Snapshot { path: PathBuf },
    Synthetic(SyntheticSpec),
}

impl DataSource {
    /// `.fsds` files are snapshots, anything else is read as CSV.
    pub fn from_path(path: PathBuf, label: Option<String>) -> Self {
        if path.extension().is_some_and(|e| e == "fsds") {
            DataSource::Snapshot { path }
        } else {
            DataSource::Csv {
                path,
                label: label.unwrap_or_else(|| "label".into()),
            }
        }
    }

    pub fn load_splits(&self, seed: u64) -> Result<Splits, CliError> {
        Ok(match self {
            DataSource::Csv { path, label } => load_csv_splits(path, label, seed)?,
            DataSource::Snapshot { path } => split_dataset(&TabularDataset::load_snapshot(path)?, seed)?,
            DataSource::Synthetic(spec) => split_dataset(&generate_synthetic(spec)?, seed)?,
        })
    }
}

/// Everything a run needs. Loaded from TOML, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<DataSource>,
    pub model: ModelConfig,
    /// `train.importance` is ignored; the top-level `importance` is used.
    pub train: TrainConfig,
    pub importance: ImportanceConfig,
    pub retrain_model: Option<ModelConfig>,
    pub retrain_train: Option<TrainConfig>,
    pub k: Option<usize>,
    pub k_list: Vec<usize>,
    pub delta: f64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            importance: ImportanceConfig::default(),
            retrain_model: None,
            retrain_train: None,
            k: None,
            k_list: Vec::new(),
            delta: 0.005,
            out: PathBuf::from("fieldsel-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Resolves the single effective importance config into the training
    /// settings so the echo in the manifest shows what actually ran.
    pub fn normalize(&mut self) {
        self.train.importance = self.importance.clone();
        if let Some(t) = &mut self.retrain_train {
            t.importance = self.importance.clone();
        }
    }

    pub fn selection(&self) -> SelectionConfig {
        let mut train = self.train.clone();
        train.importance = self.importance.clone();
        SelectionConfig {
            model: self.model.clone(),
            train,
            retrain_model: self.retrain_model.clone(),
            retrain_train: self.retrain_train.clone(),
            seed: self.seed,
        }
    }

    pub fn splits(&self) -> Result<Splits, CliError> {
        self.data
            .as_ref()
            .ok_or_else(|| CliError::Usage("no dataset: pass --data or set [data] in the config".into()))?
            .load_splits(self.seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.selection().validate()?;
        if !(self.delta >= 0.0) {
            return Err(CliError::Usage(format!("delta {} must be >= 0", self.delta)));
        }
        Ok(())
    }
}
