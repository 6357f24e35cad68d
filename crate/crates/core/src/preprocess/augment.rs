//! Random augmentation: rotation (volume and labels together), Gaussian
//! noise and cutout (volume only).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::PreprocessConfig;
use crate::volume_io::{Dims, IntensityVolume, LabelVolume};

/// Plane spanned when rotating about `axis` (0 = D, 1 = H, 2 = W).
fn plane(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        2 => (0, 1),
        _ => panic!("rotation axis must be 0, 1 or 2"),
    }
}

fn source_point(p: [f64; 3], centre: [f64; 3], axis: usize, cos: f64, sin: f64) -> [f64; 3] {
    let (i, j) = plane(axis);
    let (a, b) = (p[i] - centre[i], p[j] - centre[j]);
    let mut q = p;
    // inverse rotation maps output voxels back into the input
    q[i] = centre[i] + cos * a + sin * b;
    q[j] = centre[j] - sin * a + cos * b;
    q
}

fn trilinear(vol: &IntensityVolume, q: [f64; 3]) -> f64 {
    let ext = vol.dims.as_array();
    if (0..3).any(|a| q[a] < -0.5 || q[a] > ext[a] as f64 - 0.5) {
        return 0.0;
    }
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let c = q[a].clamp(0.0, (ext[a] - 1) as f64);
        lo[a] = c.floor() as usize;
        hi[a] = (lo[a] + 1).min(ext[a] - 1);
        t[a] = c - lo[a] as f64;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut wgt = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if corner >> a & 1 == 1 {
                wgt *= t[a];
                idx[a] = hi[a];
            } else {
                wgt *= 1.0 - t[a];
                idx[a] = lo[a];
            }
        }
        if wgt != 0.0 {
            acc += wgt * vol.get(idx[0], idx[1], idx[2]);
        }
    }
    acc
}

/// Rotate volume (trilinear) and labels (nearest) by `degrees` about the
/// volume centre. Voxels sampled from outside become 0 / background.
pub fn rotate(vol: &IntensityVolume, labels: &LabelVolume, axis: usize, degrees: f64) -> (IntensityVolume, LabelVolume) {
    assert_eq!(vol.dims, labels.dims);
    let dims = vol.dims;
    let ext = dims.as_array();
    let centre = ext.map(|n| (n as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut out_v = vol.clone();
    let mut out_l = labels.clone();
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let i = dims.index(z, y, x);
                let q = source_point([z as f64, y as f64, x as f64], centre, axis, cos, sin);
                out_v.voxels[i] = trilinear(vol, q);
                let r = q.map(f64::round);
                out_l.voxels[i] = if (0..3).all(|a| r[a] >= 0.0 && r[a] < ext[a] as f64) {
                    labels.voxels[dims.index(r[0] as usize, r[1] as usize, r[2] as usize)]
                } else {
                    0
                };
            }
        }
    }
    (out_v, out_l)
}

/// Zero an axis-aligned box `[origin, origin + size)` of the volume.
pub fn cutout(vol: &mut IntensityVolume, origin: [usize; 3], size: [usize; 3]) {
    let dims = vol.dims;
    let ext = dims.as_array();
    let end: [usize; 3] = std::array::from_fn(|a| (origin[a] + size[a]).min(ext[a]));
    for z in origin[0]..end[0] {
        for y in origin[1]..end[1] {
            for x in origin[2]..end[2] {
                vol.voxels[dims.index(z, y, x)] = 0.0;
            }
        }
    }
}

/// Random cutout box no larger than `fraction` of each axis (at least 1 voxel).
pub fn random_box(dims: Dims, fraction: f64, rng: &mut impl Rng) -> ([usize; 3], [usize; 3]) {
    let ext = dims.as_array();
    let size: [usize; 3] = std::array::from_fn(|a| {
        let max = ((ext[a] as f64 * fraction).floor() as usize).clamp(1, ext[a]);
        rng.gen_range(1..=max)
    });
    let origin: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=ext[a] - size[a]));
    (origin, size)
}

/// Apply each augmentation independently with `cfg.augmentation_probability`.
pub fn augment(
    vol: &IntensityVolume,
    labels: &LabelVolume,
    cfg: &PreprocessConfig,
    rng: &mut impl Rng,
) -> (IntensityVolume, LabelVolume) {
    let p = cfg.augmentation_probability;
    let (mut v, l) = if rng.gen_bool(p) {
        let axis = rng.gen_range(0..3);
        let deg = rng.gen_range(-cfg.rotation_max_deg..=cfg.rotation_max_deg);
        rotate(vol, labels, axis, deg)
    } else {
        (vol.clone(), labels.clone())
    };
    if rng.gen_bool(p) && cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        for x in &mut v.voxels {
            *x = (*x + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    if rng.gen_bool(p) {
        let (origin, size) = random_box(v.dims, cfg.cutout_fraction, rng);
        cutout(&mut v, origin, size);
    }
    (v, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::generate_phantom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probability_zero_is_identity() {
        let (v, l) = generate_phantom(1, Dims::cube(16), 3).unwrap();
        let cfg = PreprocessConfig {
            augmentation_probability: 0.0,
            ..PreprocessConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (v2, l2) = augment(&v, &l, &cfg, &mut rng);
        assert_eq!(v2, v);
        assert_eq!(l2, l);
    }

    #[test]
    fn quarter_turn_forward_and_back_is_exact_on_cubes() {
        for n in [16, 17] {
            let (v, l) = generate_phantom(2, Dims::cube(n), 4).unwrap();
            for axis in 0..3 {
                let (v1, l1) = rotate(&v, &l, axis, 90.0);
                assert_ne!(l1.voxels, l.voxels);
                let (_, l2) = rotate(&v1, &l1, axis, -90.0);
                assert_eq!(l2.voxels, l.voxels, "n={n} axis={axis}");
            }
        }
    }

    #[test]
    fn rotation_keeps_label_codes_valid() {
        let (v, l) = generate_phantom(5, Dims::new(16, 18, 20), 5).unwrap();
        let (_, l2) = rotate(&v, &l, 1, 7.5);
        l2.validate().unwrap();
    }

    #[test]
    fn cutout_zeroes_exactly_one_box() {
        let dims = Dims::new(16, 20, 24);
        let mut v = IntensityVolume::filled(dims, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (origin, size) = random_box(dims, 0.125, &mut rng);
        cutout(&mut v, origin, size);
        let zeros: Vec<[usize; 3]> = (0..dims.len()).filter(|&i| v.voxels[i] == 0.0).map(|i| dims.coords(i)).collect();
        assert_eq!(zeros.len(), size.iter().product::<usize>());
        for p in zeros {
            for a in 0..3 {
                assert!(p[a] >= origin[a] && p[a] < origin[a] + size[a]);
            }
        }
        assert!(size[0] <= 2 && size[1] <= 2 && size[2] <= 3);
    }

    #[test]
    fn cutout_only_touches_volume() {
        let (v, l) = generate_phantom(6, Dims::cube(16), 3).unwrap();
        let cfg = PreprocessConfig {
            augmentation_probability: 1.0,
            rotation_max_deg: 0.0,
            noise_sigma: 0.0,
            ..PreprocessConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, l2) = augment(&v, &l, &cfg, &mut rng);
        assert_eq!(l2.voxels, l.voxels);
    }
}
