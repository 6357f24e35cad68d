//! Volumes, label maps, channel stacks and their file formats.
//!
//! All volumes are stored in canonical `(D, H, W)` order with `W` varying
//! fastest, which is also the NIfTI on-disk order with `x = W`, `y = H`,
//! `z = D`.

mod label_map;
mod nifti_io;
mod phantom;

pub use label_map::LabelMap;
pub use nifti_io::{export_attention, load_labels, load_volume, save_labels, save_prediction, save_stack, save_volume, load_stack};
pub use phantom::{designed_adjacency, generate_phantom};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial extent in voxels, `(D, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> [usize; 3] {
        [i / (self.h * self.w), (i / self.w) % self.h, i % self.w]
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn from_slice(s: &[usize]) -> Result<Self> {
        match s {
            [d, h, w] => Ok(Self::new(*d, *h, *w)),
            _ => Err(Error::Shape(format!("expected 3 spatial dims, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Scalar image volume with voxel spacing in millimetres, `(D, H, W)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityVolume {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub voxels: Vec<f64>,
}

impl IntensityVolume {
    pub fn new(dims: Dims, spacing: [f64; 3], voxels: Vec<f64>) -> Result<Self> {
        let v = Self { dims, spacing, voxels };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            voxels: vec![value; dims.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxels.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "volume {} needs {} voxels, got {}",
                self.dims,
                self.dims.len(),
                self.voxels.len()
            )));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if let Some(i) = self.voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite voxel at index {i}")));
        }
        Ok(())
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels[self.dims.index(z, y, x)]
    }

    /// `[1, D, H, W]` network input tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims.as_array();
        Tensor::from_vec(&[1, d, h, w], self.voxels.clone()).expect("volume shape")
    }
}

/// Integer structure codes aligned with an intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub voxels: Vec<u16>,
    pub label_map: LabelMap,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: [f64; 3], voxels: Vec<u16>, label_map: LabelMap) -> Result<Self> {
        let v = Self {
            dims,
            spacing,
            voxels,
            label_map,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn background(dims: Dims, label_map: LabelMap) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            voxels: vec![0; dims.len()],
            label_map,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxels.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "label volume {} needs {} voxels, got {}",
                self.dims,
                self.dims.len(),
                self.voxels.len()
            )));
        }
        let mut unknown: Vec<u32> = self
            .voxels
            .iter()
            .filter(|&&c| c != 0 && self.label_map.class_of_code(c).is_none())
            .map(|&c| c as u32)
            .collect();
        unknown.sort_unstable();
        unknown.dedup();
        if !unknown.is_empty() {
            return Err(Error::UnknownLabelCodes { codes: unknown });
        }
        Ok(())
    }

    pub fn n_structures(&self) -> usize {
        self.label_map.len()
    }

    /// Per-voxel class index: 0 for background, `k` for the k-th structure.
    pub fn class_indices(&self) -> Vec<usize> {
        self.voxels
            .iter()
            .map(|&c| if c == 0 { 0 } else { self.label_map.class_of_code(c).expect("validated code") })
            .collect()
    }

    /// Binary mask of one structure (1-based class index).
    pub fn mask_of_class(&self, class: usize) -> Vec<bool> {
        let code = self.label_map.code_of_class(class);
        self.voxels.iter().map(|&c| c == code).collect()
    }

    /// Union of all structures.
    pub fn foreground_mask(&self) -> Vec<bool> {
        self.voxels.iter().map(|&c| c != 0).collect()
    }

    /// Distinct codes present, sorted.
    pub fn code_set(&self) -> Vec<u16> {
        let mut s = self.voxels.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// What a [`ChannelMapStack`] holds; decides its value invariants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapRole {
    OneHot,
    Probability,
    Contour,
    Distance,
}

impl std::fmt::Display for MapRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MapRole::OneHot => "onehot",
            MapRole::Probability => "probability",
            MapRole::Contour => "contour",
            MapRole::Distance => "distance",
        };
        f.write_str(s)
    }
}

/// `N x D x H x W` stack of per-class scalar maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMapStack {
    role: MapRole,
    values: Tensor,
}

impl ChannelMapStack {
    pub fn new(role: MapRole, values: Tensor) -> Result<Self> {
        let s = Self { role, values };
        s.validate()?;
        Ok(s)
    }

    pub(crate) fn new_unchecked(role: MapRole, values: Tensor) -> Self {
        Self { role, values }
    }

    pub fn role(&self) -> MapRole {
        self.role
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dims(&self) -> Dims {
        let [_, d, h, w] = self.values.dims4();
        Dims::new(d, h, w)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.values.channel(c)
    }

    pub fn expect_role(&self, role: MapRole) -> Result<()> {
        if self.role != role {
            return Err(Error::WrongRole {
                expected: role.to_string(),
                found: self.role.to_string(),
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.shape().len() != 4 {
            return Err(Error::Shape(format!("channel stack must be 4D, got {:?}", self.values.shape())));
        }
        let data = self.values.data();
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{} stack violates {what}", self.role)));
        match self.role {
            MapRole::OneHot => {
                if data.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return bad("binary values");
                }
                let n = self.values.channel_len();
                for i in 0..n {
                    let s: f64 = (0..self.channels()).map(|c| data[c * n + i]).sum();
                    if s > 1.0 {
                        return bad("at most one class per voxel");
                    }
                }
            }
            MapRole::Probability | MapRole::Contour => {
                if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return bad("values in [0, 1]");
                }
            }
            MapRole::Distance => {
                if data.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                    return bad("non-negative finite distances");
                }
            }
        }
        Ok(())
    }
}

/// Indicator stack of the structures in `labels`, optionally with a leading
/// background channel.
pub fn one_hot(labels: &LabelVolume, include_background: bool) -> ChannelMapStack {
    let n = labels.n_structures();
    let offset = usize::from(!include_background);
    let channels = n + 1 - offset;
    let [d, h, w] = labels.dims.as_array();
    let vol = labels.dims.len();
    let mut values = Tensor::zeros(&[channels, d, h, w]);
    for (i, class) in labels.class_indices().into_iter().enumerate() {
        if class >= offset {
            values.data_mut()[(class - offset) * vol + i] = 1.0;
        }
    }
    ChannelMapStack::new_unchecked(MapRole::OneHot, values)
}

/// Argmax decode of a stack whose channel 0 is background (ties resolve to
/// the lower class index).
pub fn decode(stack: &ChannelMapStack, label_map: &LabelMap) -> Result<LabelVolume> {
    let c = stack.channels();
    if c != label_map.len() + 1 {
        return Err(Error::Shape(format!(
            "decode needs {} channels (background + structures), got {c}",
            label_map.len() + 1
        )));
    }
    let dims = stack.dims();
    let n = dims.len();
    let data = stack.values().data();
    let voxels = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if data[k * n + i] > data[best * n + i] {
                    best = k;
                }
            }
            if best == 0 {
                0
            } else {
                label_map.code_of_class(best)
            }
        })
        .collect();
    Ok(LabelVolume {
        dims,
        spacing: [1.0; 3],
        voxels,
        label_map: label_map.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_labels(dims: Dims, seed: u64) -> LabelVolume {
        let map = LabelMap::mmwhs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let voxels = (0..dims.len())
            .map(|_| {
                let k = rng.gen_range(0..=map.len());
                if k == 0 {
                    0
                } else {
                    map.code_of_class(k)
                }
            })
            .collect();
        LabelVolume::new(dims, [1.0; 3], voxels, map).unwrap()
    }

    #[test]
    fn one_hot_all_background_without_background_channel() {
        let labels = LabelVolume::background(Dims::cube(4), LabelMap::mmwhs());
        let s = one_hot(&labels, false);
        assert_eq!(s.channels(), 7);
        assert!(s.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_single_voxel() {
        let map = LabelMap::mmwhs();
        let mut labels = LabelVolume::background(Dims::cube(4), map.clone());
        let lv = map.code_of("LV").unwrap();
        labels.voxels[Dims::cube(4).index(1, 2, 3)] = lv;
        let s = one_hot(&labels, false);
        let class = map.class_of_code(lv).unwrap();
        assert_eq!(s.channel(class - 1).iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(s.values().sum(), 1.0);
    }

    #[test]
    fn one_hot_with_background_partitions_every_voxel() {
        let labels = random_labels(Dims::cube(8), 17);
        let s = one_hot(&labels, true);
        assert_eq!(s.channels(), 8);
        let n = labels.dims.len();
        for i in 0..n {
            let sum: f64 = (0..8).map(|c| s.values().data()[c * n + i]).sum();
            assert_eq!(sum, 1.0, "voxel {i}");
        }
        s.validate().unwrap();
    }

    #[test]
    fn unknown_code_is_reported() {
        let mut labels = LabelVolume::background(Dims::cube(2), LabelMap::mmwhs());
        labels.voxels[3] = 999;
        match labels.validate() {
            Err(Error::UnknownLabelCodes { codes }) => assert_eq!(codes, vec![999]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distance_stack_rejects_negative_values() {
        let t = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, -1.0]).unwrap();
        assert!(ChannelMapStack::new(MapRole::Distance, t).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_one_hot(seed in any::<u64>(), d in 1usize..6, h in 1usize..6, w in 1usize..6) {
            let labels = random_labels(Dims::new(d, h, w), seed);
            let back = decode(&one_hot(&labels, true), &labels.label_map).unwrap();
            prop_assert_eq!(back.voxels, labels.voxels);
        }
    }
}
