#![allow(dead_code)]

use fieldsel_core::data::{generate_synthetic, split_dataset, Splits, SyntheticSpec};
use fieldsel_core::model::{Arch, CtrModel};
use fieldsel_core::trainer::{train, TrainConfig};

pub fn planted_spec(n_rows: usize, n_fields: usize, planted: Vec<usize>, rate: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_rows,
        n_fields,
        planted,
        vocab_size: 100,
        target_positive_rate: rate,
        interaction_pairs: vec![],
        seed,
    }
}

pub fn planted_splits(spec: &SyntheticSpec) -> Splits {
    let data = generate_synthetic(spec).unwrap();
    split_dataset(&data, spec.seed).unwrap()
}

pub fn trained(splits: &Splits, arch: Arch, embed_dim: usize, hidden: &[usize], epochs: usize, seed: u64) -> CtrModel {
    let init = CtrModel::new(splits.train.schema(embed_dim).unwrap(), arch, hidden, seed).unwrap();
    let cfg = TrainConfig {
        max_epochs: epochs,
        seed,
        ..TrainConfig::default()
    };
    train(&init, &splits.train, &splits.validation, &cfg).unwrap().0
}

/// Embedding block and labels of the first `n` rows.
pub fn head_block(
    model: &CtrModel,
    ds: &fieldsel_core::data::TabularDataset,
    n: usize,
) -> (fieldsel_core::autodiff::EmbeddingBlock, Vec<u8>) {
    let n = n.min(ds.len());
    let idx: Vec<usize> = (0..n).flat_map(|r| ds.row(r).iter().copied()).collect();
    (model.embed(&idx).unwrap(), ds.labels[..n].to_vec())
}
