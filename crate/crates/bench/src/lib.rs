//! Shared inputs for the benchmarks.

use cdanet::harness::{ExperimentConfig, PreparedCase};
use cdanet::network::Variant;
use cdanet::volume_io::generate_phantom;
use cdanet::Dims;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bernoulli mask with foreground probability `p`.
pub fn random_mask(dims: Dims, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dims.len()).map(|_| rng.gen_bool(p)).collect()
}

/// Solid ball of radius `r` voxels centred in the grid.
pub fn ball(dims: Dims, r: f64) -> Vec<bool> {
    let c = dims.as_array().map(|n| (n as f64 - 1.0) / 2.0);
    (0..dims.len())
        .map(|i| {
            let p = dims.coords(i);
            (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>() <= r * r
        })
        .collect()
}

/// Small config on an `n`-cube grid without augmentation.
pub fn small_config(variant: Variant, n: usize, base_channels: usize, depth: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.variant = variant;
    cfg.model.base_channels = base_channels;
    cfg.model.depth = depth;
    cfg.preprocess.target_size = [n; 3];
    cfg.training.augment = false;
    cfg
}

/// A 3-structure phantom prepared for `cfg`.
pub fn phantom_case(cfg: &ExperimentConfig, seed: u64) -> PreparedCase {
    let dims = cfg.preprocess.target_dims();
    let (img, lab) = generate_phantom(seed, dims, 3).expect("phantom");
    PreparedCase::prepare("bench", &img, &lab, &cfg.preprocess).expect("prepare")
}
