//! Synthetic multi-structure phantoms.
//!
//! A jittered ellipsoidal "organ" is split into Voronoi compartments around
//! seeds laid out on a ring, so every compartment shares faces with its ring
//! neighbours. With three or more structures the last one is a small
//! ellipsoid nested inside the first compartment. Compartments get almost
//! the same mean intensity, so their shared boundaries cannot be found by
//! thresholding.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dims, IntensityVolume, LabelMap, LabelVolume};
use crate::error::{Error, Result};

const MIN_AXIS: usize = 16;
const BACKGROUND_HU: f64 = -60.0;
const TISSUE_HU: f64 = 260.0;
/// Mean-intensity step between consecutive compartments.
const COMPARTMENT_STEP_HU: f64 = 12.0;
const NOISE_HU: f64 = 25.0;
const NESTED_RADIUS: f64 = 0.42;

fn uses_nested(n_structures: usize) -> bool {
    n_structures >= 3
}

/// Class pairs (1-based) that share a boundary by construction.
pub fn designed_adjacency(n_structures: usize) -> Vec<(usize, usize)> {
    let cells = if uses_nested(n_structures) { n_structures - 1 } else { n_structures };
    let mut pairs = Vec::new();
    if cells == 2 {
        pairs.push((1, 2));
    } else {
        for k in 0..cells {
            let (a, b) = (k + 1, (k + 1) % cells + 1);
            pairs.push((a.min(b), a.max(b)));
        }
    }
    if uses_nested(n_structures) {
        pairs.push((1, n_structures));
    }
    pairs
}

/// Deterministic phantom for `(seed, size, n_structures)`. Codes come from
/// the first `n_structures` entries of the bundled MM-WHS label map.
pub fn generate_phantom(seed: u64, size: Dims, n_structures: usize) -> Result<(IntensityVolume, LabelVolume)> {
    if n_structures < 2 {
        return Err(Error::InvalidArgument(format!("phantom needs at least 2 structures, got {n_structures}")));
    }
    let label_map = LabelMap::mmwhs().truncated(n_structures).map_err(|_| {
        Error::InvalidArgument(format!("phantom supports at most 7 structures, got {n_structures}"))
    })?;
    if size.as_array().iter().any(|&s| s < MIN_AXIS) {
        return Err(Error::InvalidArgument(format!(
            "phantom size {size} too small: every axis must be at least {MIN_AXIS}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axes = size.as_array().map(|s| s as f64);
    let centre: [f64; 3] = std::array::from_fn(|i| (axes[i] - 1.0) / 2.0 + rng.gen_range(-0.04..0.04) * axes[i]);
    let radii: [f64; 3] = std::array::from_fn(|i| 0.36 * axes[i] * rng.gen_range(0.92..1.08));

    let cells = if uses_nested(n_structures) { n_structures - 1 } else { n_structures };
    let spin = rng.gen_range(-0.2..0.2);
    let seeds: Vec<[f64; 3]> = (0..cells)
        .map(|k| {
            let angle = spin + TAU * k as f64 / cells as f64 + rng.gen_range(-0.12..0.12);
            let tilt = if cells > 2 && k % 2 == 1 { 0.2 } else { -0.1 };
            [tilt + rng.gen_range(-0.05..0.05), 0.5 * angle.sin(), 0.5 * angle.cos()]
        })
        .collect();
    let nested_scale: [f64; 3] = std::array::from_fn(|_| NESTED_RADIUS * rng.gen_range(0.9..1.1));

    let noise = Normal::new(0.0, NOISE_HU).expect("finite sigma");
    let mut voxels = Vec::with_capacity(size.len());
    let mut labels = Vec::with_capacity(size.len());
    for z in 0..size.d {
        for y in 0..size.h {
            for x in 0..size.w {
                let p = [z as f64, y as f64, x as f64];
                let u: [f64; 3] = std::array::from_fn(|i| (p[i] - centre[i]) / radii[i]);
                let r2: f64 = u.iter().map(|v| v * v).sum();
                let class = if r2 <= 1.0 {
                    let nested = uses_nested(n_structures)
                        && (0..3)
                            .map(|i| ((u[i] - seeds[0][i]) / nested_scale[i]).powi(2))
                            .sum::<f64>()
                            <= 1.0;
                    if nested {
                        n_structures
                    } else {
                        let (best, _) = seeds
                            .iter()
                            .map(|s| (0..3).map(|i| (u[i] - s[i]).powi(2)).sum::<f64>())
                            .enumerate()
                            .fold((0, f64::INFINITY), |acc, (k, d)| if d < acc.1 { (k, d) } else { acc });
                        best + 1
                    }
                } else {
                    0
                };
                let mean = if class == 0 {
                    BACKGROUND_HU
                } else {
                    TISSUE_HU + COMPARTMENT_STEP_HU * (class as f64 - 1.0)
                };
                voxels.push(mean + noise.sample(&mut rng));
                labels.push(if class == 0 { 0 } else { label_map.code_of_class(class) });
            }
        }
    }

    for class in 1..=n_structures {
        let code = label_map.code_of_class(class);
        if !labels.contains(&code) {
            return Err(Error::InvalidArgument(format!(
                "phantom size {size} too small to fit {n_structures} structures (class {class} is empty)"
            )));
        }
    }

    let image = IntensityVolume::new(size, [1.0; 3], voxels)?;
    let labels = LabelVolume::new(size, [1.0; 3], labels, label_map)?;
    Ok((image, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Distinct class pairs found at 6-connected or 26-connected neighbours.
    fn touching_pairs(labels: &LabelVolume, chebyshev: bool) -> Vec<(usize, usize)> {
        let cls = labels.class_indices();
        let d = labels.dims;
        let mut pairs = Vec::new();
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let a = cls[d.index(z, y, x)];
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let manhattan = dz.abs() + dy.abs() + dx.abs();
                                if manhattan == 0 || (!chebyshev && manhattan != 1) {
                                    continue;
                                }
                                let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                                if nz < 0 || ny < 0 || nx < 0 || nz >= d.d as i64 || ny >= d.h as i64 || nx >= d.w as i64 {
                                    continue;
                                }
                                let b = cls[d.index(nz as usize, ny as usize, nx as usize)];
                                if a != 0 && b != 0 && a != b {
                                    pairs.push((a.min(b), a.max(b)));
                                }
                            }
                        }
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    #[test]
    fn repeated_calls_are_identical() {
        let a = generate_phantom(0, Dims::cube(32), 3).unwrap();
        let b = generate_phantom(0, Dims::cube(32), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(1, Dims::cube(32), 3).unwrap();
        assert_ne!(a.0.voxels, c.0.voxels);
    }

    #[test]
    fn every_structure_is_present() {
        for n in 2..=7 {
            for seed in 0..4 {
                let (_, labels) = generate_phantom(seed, Dims::cube(16), n).unwrap();
                for class in 1..=n {
                    assert!(labels.mask_of_class(class).iter().any(|&b| b), "n={n} seed={seed} class={class}");
                }
            }
        }
    }

    #[test]
    fn distinct_structures_touch() {
        let (_, labels) = generate_phantom(0, Dims::cube(32), 3).unwrap();
        assert!(!touching_pairs(&labels, true).is_empty());
    }

    #[test]
    fn designed_pairs_share_a_face() {
        for n in 2..=7 {
            for seed in 0..3 {
                let (_, labels) = generate_phantom(seed, Dims::new(16, 20, 24), n).unwrap();
                let found = touching_pairs(&labels, false);
                for pair in designed_adjacency(n) {
                    assert!(found.contains(&pair), "n={n} seed={seed} missing {pair:?} in {found:?}");
                }
            }
        }
    }

    #[test]
    fn adjacent_compartments_are_not_intensity_separable() {
        let (img, labels) = generate_phantom(3, Dims::cube(32), 3).unwrap();
        let mean = |class: usize| {
            let m = labels.mask_of_class(class);
            let (s, n) = img.voxels.iter().zip(&m).filter(|(_, &b)| b).fold((0.0, 0), |(s, n), (v, _)| (s + v, n + 1));
            s / n as f64
        };
        assert!((mean(1) - mean(2)).abs() < NOISE_HU);
    }

    #[test]
    fn rejects_small_sizes_and_counts() {
        assert!(generate_phantom(0, Dims::new(15, 32, 32), 3).is_err());
        assert!(generate_phantom(0, Dims::cube(32), 1).is_err());
        assert!(generate_phantom(0, Dims::cube(32), 8).is_err());
    }
}
