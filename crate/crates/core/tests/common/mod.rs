#![allow(dead_code)]

use std::path::Path;

use cdanet::harness::{ExperimentConfig, PreparedCase, IMAGE_SUFFIX, LABEL_MAP_FILE, LABEL_SUFFIX};
use cdanet::network::Variant;
use cdanet::volume_io::{generate_phantom, save_labels, save_volume, LabelMap};
use cdanet::Dims;

pub fn config(variant: Variant, n: usize, base_channels: usize, depth: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.variant = variant;
    cfg.model.base_channels = base_channels;
    cfg.model.depth = depth;
    cfg.preprocess.target_size = [n; 3];
    cfg.training.augment = false;
    cfg
}

pub fn label_map(n_structures: usize) -> LabelMap {
    LabelMap::mmwhs().truncated(n_structures).unwrap()
}

/// A 3-structure phantom of `native` edge length prepared for `cfg`.
pub fn phantom_case(cfg: &ExperimentConfig, seed: u64, native: usize) -> PreparedCase {
    let (img, lab) = generate_phantom(seed, Dims::cube(native), 3).unwrap();
    PreparedCase::prepare(&format!("phantom_{seed:03}"), &img, &lab, &cfg.preprocess).unwrap()
}

/// Write `count` phantoms plus their label map into `root`.
pub fn write_dataset(root: &Path, count: u64, native: usize) {
    for seed in 0..count {
        let (img, lab) = generate_phantom(seed, Dims::cube(native), 3).unwrap();
        let id = format!("phantom_{seed:03}");
        save_volume(&img, &root.join(format!("{id}{IMAGE_SUFFIX}.nii.gz"))).unwrap();
        save_labels(&lab, &root.join(format!("{id}{LABEL_SUFFIX}.nii.gz"))).unwrap();
    }
    label_map(3).save(&root.join(LABEL_MAP_FILE)).unwrap();
}
