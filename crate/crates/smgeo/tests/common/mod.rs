#![allow(dead_code)]

use std::path::Path;

use smgeo::config::RunConfig;
use smgeo::dataset::{generate_dataset, write_dataset, DataConfig, Dataset, SplitCounts};

/// Writes a small desk-format dataset and loads it back.
pub fn tiny_dataset(dir: &Path, counts: SplitCounts) -> Dataset {
    let cfg = DataConfig { seed: 5, counts, ..DataConfig::default() };
    let (manifest, samples) = generate_dataset(&cfg).unwrap();
    write_dataset(&manifest, &samples, dir).unwrap();
    Dataset::load(dir).unwrap()
}

pub fn default_tiny_dataset(dir: &Path) -> Dataset {
    tiny_dataset(dir, SplitCounts { train: 8, val: 4, test: 4 })
}

/// Two short epochs of two batches each.
pub fn tiny_config(data: &Path, checkpoints: &Path) -> RunConfig {
    RunConfig {
        epochs: 2,
        batch_size: 2,
        max_steps_per_epoch: Some(2),
        dataset: data.to_path_buf(),
        checkpoint_dir: checkpoints.to_path_buf(),
        ..RunConfig::default()
    }
}
