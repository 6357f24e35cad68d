//! Network inputs and supervision targets: intensity windowing, resizing,
//! augmentation, contour maps and foreground distance transforms.

mod augment;
mod contour;
pub mod edt;

use serde::{Deserialize, Serialize};

use crate::autodiff::resample::resize_axis;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume_io::{ChannelMapStack, Dims, IntensityVolume, LabelVolume, MapRole};

pub use augment::{augment, cutout, random_box, rotate};
pub use contour::{contour_mask, prewitt_gradient};
pub use edt::{edt_bruteforce, foreground_distance, squared_edt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// HU mapped to 0.
    pub window_low: f64,
    /// HU mapped to 1.
    pub window_high: f64,
    /// `[D, H, W]`.
    pub target_size: [usize; 3],
    /// Std-dev of additive noise, as a fraction of the normalized range.
    pub noise_sigma: f64,
    pub rotation_max_deg: f64,
    /// Largest cutout edge as a fraction of each axis.
    pub cutout_fraction: f64,
    pub augmentation_probability: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_low: -300.0,
            window_high: 1000.0,
            target_size: [64, 128, 128],
            noise_sigma: 0.02,
            rotation_max_deg: 10.0,
            cutout_fraction: 0.125,
            augmentation_probability: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.window_low.is_finite() && self.window_high.is_finite() && self.window_low < self.window_high) {
            return fail(format!(
                "window_low ({}) must be below window_high ({})",
                self.window_low, self.window_high
            ));
        }
        if self.target_size.contains(&0) {
            return fail(format!("target_size {:?} must be positive", self.target_size));
        }
        if !(0.0..=1.0).contains(&self.augmentation_probability) {
            return fail(format!("augmentation_probability {} outside [0, 1]", self.augmentation_probability));
        }
        if !(0.0..=1.0).contains(&self.cutout_fraction) {
            return fail(format!("cutout_fraction {} outside [0, 1]", self.cutout_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return fail(format!("rotation_max_deg {} must be non-negative", self.rotation_max_deg));
        }
        Ok(())
    }

    pub fn target_dims(&self) -> Dims {
        Dims::from_slice(&self.target_size).expect("3 entries")
    }
}

/// Map `[window_low, window_high]` linearly onto `[0, 1]`, clamping outside.
pub fn window_normalize(vol: &IntensityVolume, cfg: &PreprocessConfig) -> IntensityVolume {
    let span = cfg.window_high - cfg.window_low;
    let mut out = vol.clone();
    for v in &mut out.voxels {
        *v = ((*v - cfg.window_low) / span).clamp(0.0, 1.0);
    }
    out
}

/// Resampling to a new grid; spacing is rescaled so the physical extent is kept.
pub trait Resample: Sized {
    fn resized(&self, target: Dims) -> Result<Self>;
}

fn check_target(dims: Dims, target: Dims) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::Shape("cannot resize an empty volume".into()));
    }
    if target.is_empty() {
        return Err(Error::Shape(format!("zero-sized resize target {target}")));
    }
    Ok(())
}

fn rescaled_spacing(spacing: [f64; 3], from: Dims, to: Dims) -> [f64; 3] {
    let (a, b) = (from.as_array(), to.as_array());
    std::array::from_fn(|i| spacing[i] * a[i] as f64 / b[i] as f64)
}

/// Trilinear (half-pixel centres, edge clamp).
impl Resample for IntensityVolume {
    fn resized(&self, target: Dims) -> Result<Self> {
        check_target(self.dims, target)?;
        let mut t = self.to_tensor();
        for (axis, len) in target.as_array().into_iter().enumerate() {
            if t.shape()[axis + 1] != len {
                t = resize_axis(&t, axis + 1, len).0;
            }
        }
        IntensityVolume::new(target, rescaled_spacing(self.spacing, self.dims, target), t.into_data())
    }
}

/// Nearest neighbour: output voxel `o` reads input `floor((o + 0.5) * in / out)`.
impl Resample for LabelVolume {
    fn resized(&self, target: Dims) -> Result<Self> {
        check_target(self.dims, target)?;
        let src = self.dims.as_array();
        let maps: Vec<Vec<usize>> = target
            .as_array()
            .iter()
            .zip(src)
            .map(|(&out, inp)| nearest_indices(inp, out))
            .collect();
        let mut voxels = Vec::with_capacity(target.len());
        for &z in &maps[0] {
            for &y in &maps[1] {
                for &x in &maps[2] {
                    voxels.push(self.voxels[self.dims.index(z, y, x)]);
                }
            }
        }
        LabelVolume::new(
            target,
            rescaled_spacing(self.spacing, self.dims, target),
            voxels,
            self.label_map.clone(),
        )
    }
}

pub(crate) fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    (0..out_len)
        .map(|o| (((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1))
        .collect()
}

pub fn resize<T: Resample>(x: &T, target: Dims) -> Result<T> {
    x.resized(target)
}

fn per_channel(onehot: &ChannelMapStack, role: MapRole, f: impl Fn(&[bool], Dims) -> Vec<f64>) -> Result<ChannelMapStack> {
    onehot.expect_role(MapRole::OneHot)?;
    let dims = onehot.dims();
    let mut data = Vec::with_capacity(onehot.values().len());
    for c in 0..onehot.channels() {
        let mask: Vec<bool> = onehot.channel(c).iter().map(|&v| v != 0.0).collect();
        data.extend(f(&mask, dims));
    }
    let values = Tensor::from_vec(onehot.values().shape(), data)?;
    ChannelMapStack::new(role, values)
}

/// Per-channel binary contour: 1 where the 3D Prewitt gradient is nonzero.
pub fn contour_target(onehot: &ChannelMapStack) -> Result<ChannelMapStack> {
    per_channel(onehot, MapRole::Contour, |m, dims| {
        contour_mask(m, dims).into_iter().map(f64::from).collect()
    })
}

/// Per-channel foreground distance transform (see [`foreground_distance`]).
pub fn fdt_target(onehot: &ChannelMapStack) -> Result<ChannelMapStack> {
    per_channel(onehot, MapRole::Distance, foreground_distance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::{generate_phantom, one_hot, LabelMap};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol_of(dims: Dims, f: impl Fn([usize; 3]) -> f64) -> IntensityVolume {
        IntensityVolume::new(dims, [1.0; 3], (0..dims.len()).map(|i| f(dims.coords(i))).collect()).unwrap()
    }

    #[test]
    fn window_examples() {
        let cfg = PreprocessConfig::default();
        let v = IntensityVolume::new(Dims::new(1, 1, 4), [1.0; 3], vec![-300.0, 1000.0, 350.0, -1000.0]).unwrap();
        let out = window_normalize(&v, &cfg).voxels;
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 1.0);
        assert!((out[2] - 0.5).abs() < 1e-15);
        assert_eq!(out[3], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(PreprocessConfig::default().validate().is_ok());
        let bad = PreprocessConfig {
            window_low: 10.0,
            window_high: 10.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PreprocessConfig {
            augmentation_probability: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PreprocessConfig {
            target_size: [0, 4, 4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let v = IntensityVolume::filled(Dims::new(5, 7, 9), 0.3);
        let r = resize(&v, Dims::new(11, 4, 13)).unwrap();
        assert!(r.voxels.iter().all(|&x| (x - 0.3).abs() < 1e-12));
        assert_eq!(r.dims, Dims::new(11, 4, 13));
    }

    #[test]
    fn resize_rejects_zero_target() {
        let v = IntensityVolume::filled(Dims::cube(4), 1.0);
        assert!(resize(&v, Dims::new(0, 4, 4)).is_err());
    }

    #[test]
    fn label_resize_keeps_code_subset() {
        let (_, l) = generate_phantom(3, Dims::cube(24), 4).unwrap();
        let codes = l.code_set();
        for target in [Dims::cube(9), Dims::new(40, 17, 31)] {
            let r = resize(&l, target).unwrap();
            assert!(r.code_set().iter().all(|c| codes.contains(c)));
        }
    }

    #[test]
    fn label_resize_integer_upsampling_replicates() {
        let map = LabelMap::mmwhs();
        let dims = Dims::new(2, 2, 2);
        let l = LabelVolume::new(dims, [1.0; 3], vec![0, 500, 600, 420, 550, 205, 820, 850], map).unwrap();
        let r = resize(&l, Dims::cube(4)).unwrap();
        for i in 0..r.dims.len() {
            let [z, y, x] = r.dims.coords(i);
            assert_eq!(r.voxels[i], l.voxels[dims.index(z / 2, y / 2, x / 2)]);
        }
        assert_eq!(r.spacing, [0.5; 3]);
    }

    #[test]
    fn ramp_round_trip_is_close() {
        let dims = Dims::cube(64);
        let v = vol_of(dims, |[z, y, x]| (z + 2 * y + 3 * x) as f64 / (6.0 * 63.0));
        let up = resize(&v, Dims::cube(128)).unwrap();
        let back = resize(&up, dims).unwrap();
        let dev = back.voxels.iter().zip(&v.voxels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 0.05, "max deviation {dev}");
        // Interior voxels come back exactly on a linear ramp.
        let i = dims.index(30, 30, 30);
        assert!((back.voxels[i] - v.voxels[i]).abs() < 1e-12);
    }

    #[test]
    fn targets_require_onehot() {
        let (_, l) = generate_phantom(0, Dims::cube(16), 2).unwrap();
        let oh = one_hot(&l, false);
        let c = contour_target(&oh).unwrap();
        assert!(matches!(contour_target(&c), Err(Error::WrongRole { .. })));
        assert!(matches!(fdt_target(&c), Err(Error::WrongRole { .. })));
    }

    #[test]
    fn fdt_matches_bruteforce_on_random_12_cubes() {
        let dims = Dims::cube(12);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let p = rng.gen_range(0.2..0.97);
            let m: Vec<bool> = (0..dims.len()).map(|_| rng.gen_bool(p)).collect();
            let values = Tensor::from_vec(&[1, 12, 12, 12], m.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
            let oh = ChannelMapStack::new(MapRole::OneHot, values).unwrap();
            let fdt = fdt_target(&oh).unwrap();
            let brute = edt_bruteforce(&m, dims);
            let dev = fdt.channel(0).iter().zip(&brute).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dev <= 1e-6);
        }
    }

    #[test]
    fn phantom_targets_per_structure() {
        let (_, l) = generate_phantom(1, Dims::cube(20), 3).unwrap();
        let oh = one_hot(&l, false);
        let c = contour_target(&oh).unwrap();
        let f = fdt_target(&oh).unwrap();
        assert_eq!(c.channels(), 3);
        for ch in 0..3 {
            for i in 0..oh.dims().len() {
                let fg = oh.channel(ch)[i] == 1.0;
                assert_eq!(f.channel(ch)[i] == 0.0, !fg);
            }
            assert!(c.channel(ch).iter().any(|&v| v == 1.0));
        }
    }

    /// Chebyshev distance-1 neighbourhood contains both a foreground and a
    /// background voxel (outside counts as background).
    fn near_transition(m: &[bool], dims: Dims, p: [usize; 3]) -> bool {
        let (mut fg, mut bg) = (false, false);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let q = [p[0] as i64 + dz, p[1] as i64 + dy, p[2] as i64 + dx];
                    let ext = dims.as_array();
                    let inside = (0..3).all(|a| q[a] >= 0 && q[a] < ext[a] as i64);
                    if inside && m[dims.index(q[0] as usize, q[1] as usize, q[2] as usize)] {
                        fg = true;
                    } else {
                        bg = true;
                    }
                }
            }
        }
        fg && bg
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn window_output_in_unit_interval(v in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let n = v.len();
            let vol = IntensityVolume::new(Dims::new(1, 1, n), [1.0; 3], v).unwrap();
            let out = window_normalize(&vol, &PreprocessConfig::default());
            prop_assert!(out.voxels.iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn contour_lies_near_transitions(seed in any::<u64>(), d in 1usize..8, h in 1usize..8, w in 1usize..8) {
            let dims = Dims::new(d, h, w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<bool> = (0..dims.len()).map(|_| rng.gen_bool(0.5)).collect();
            let c = contour_mask(&m, dims);
            for i in 0..dims.len() {
                if c[i] {
                    prop_assert!(near_transition(&m, dims, dims.coords(i)));
                }
            }
        }

        #[test]
        fn fdt_zero_iff_background(seed in any::<u64>(), n in 1usize..10) {
            let dims = Dims::cube(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<bool> = (0..dims.len()).map(|_| rng.gen_bool(0.7)).collect();
            let f = foreground_distance(&m, dims);
            for i in 0..dims.len() {
                prop_assert_eq!(f[i] == 0.0, !m[i]);
                if m[i] { prop_assert!(f[i] >= 1.0); }
            }
        }
    }
}
