//! NIfTI-1 (`.nii` / `.nii.gz`) reading and writing.

use std::path::Path;

use ndarray::{Array, ArrayD, IxDyn};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{ChannelMapStack, Dims, IntensityVolume, LabelMap, LabelVolume, MapRole};
use crate::error::{Error, Result};
use crate::network::FeatureMap;
use crate::tensor::Tensor;

struct RawVolume {
    /// Spatial dims `(D, H, W)` plus an optional leading channel count.
    channels: Option<usize>,
    dims: Dims,
    spacing: [f64; 3],
    descrip: String,
    /// Canonical order: channel, then `D`, `H`, `W` (W fastest).
    data: Vec<f64>,
}

fn read_raw(path: &Path, allow_channels: bool) -> Result<RawVolume> {
    if !path.exists() {
        return Err(Error::volume(path, "file does not exist"));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::volume(path, format!("unreadable header or payload: {e}")))?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if !(1..=7).contains(&ndim) {
        return Err(Error::volume(path, format!("invalid dimension count {ndim}")));
    }
    let shape: Vec<usize> = header.dim[1..=ndim].iter().map(|&d| d as usize).collect();
    let channels = match shape.len() {
        3 => None,
        4 if shape[3] == 1 => None,
        4 if allow_channels => Some(shape[3]),
        n => {
            return Err(Error::volume(
                path,
                format!("expected 3 spatial dimensions, found {n}D payload {shape:?}"),
            ))
        }
    };
    let arr: ArrayD<f64> = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| Error::volume(path, format!("cannot decode voxels: {e}")))?;
    // (x, y, z[, t]) -> ([t,] z, y, x)
    let data: Vec<f64> = arr.reversed_axes().iter().copied().collect();
    let dims = Dims::new(shape[2], shape[1], shape[0]);
    let spacing = [header.pixdim[3], header.pixdim[2], header.pixdim[1]].map(|s| {
        let s = s as f64;
        if s.is_finite() && s > 0.0 {
            s
        } else {
            1.0
        }
    });
    let descrip = String::from_utf8_lossy(&header.descrip).trim_end_matches('\0').trim().to_string();
    Ok(RawVolume {
        channels,
        dims,
        spacing,
        descrip,
        data,
    })
}

fn header_for(spacing: [f64; 3], descrip: &str) -> NiftiHeader {
    let mut d = descrip.as_bytes().to_vec();
    d.resize(80, 0);
    NiftiHeader {
        pixdim: [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 1.0, 1.0, 1.0],
        xyzt_units: 2, // millimetres
        descrip: d,
        ..NiftiHeader::default()
    }
}

fn write_array<T>(path: &Path, shape: &[usize], data: Vec<T>, spacing: [f64; 3], descrip: &str) -> Result<()>
where
    T: nifti::DataElement + bytemuck::Pod,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let arr = Array::from_shape_vec(IxDyn(shape), data).map_err(|e| Error::Shape(e.to_string()))?;
    let header = header_for(spacing, descrip);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr.reversed_axes())
        .map_err(|e| Error::volume(path, format!("cannot write: {e}")))
}

/// Read a 3D intensity volume; spacing comes from `pixdim`.
pub fn load_volume(path: &Path) -> Result<IntensityVolume> {
    let raw = read_raw(path, false)?;
    IntensityVolume::new(raw.dims, raw.spacing, raw.data).map_err(|e| Error::volume(path, e.to_string()))
}

pub fn save_volume(vol: &IntensityVolume, path: &Path) -> Result<()> {
    write_array(path, &vol.dims.as_array(), vol.voxels.clone(), vol.spacing, "intensity")
}

/// Read a label volume and validate every nonzero code against `label_map`.
pub fn load_labels(path: &Path, label_map: &LabelMap) -> Result<LabelVolume> {
    let raw = read_raw(path, false)?;
    let mut bad = Vec::new();
    let voxels: Vec<u16> = raw
        .data
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
                bad.push(v);
                0
            } else {
                v as u16
            }
        })
        .collect();
    if let Some(v) = bad.first() {
        return Err(Error::volume(path, format!("label voxel {v} is not a non-negative integer code")));
    }
    LabelVolume::new(raw.dims, raw.spacing, voxels, label_map.clone())
}

/// Write labels as unsigned 16-bit codes (exact round trip).
pub fn save_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    write_array(path, &labels.dims.as_array(), labels.voxels.clone(), labels.spacing, "labels")
}

pub fn save_prediction(labels: &LabelVolume, path: &Path) -> Result<()> {
    save_labels(labels, path)
}

/// Write a single-channel attention map as a float volume; values must lie in `[0, 1]`.
pub fn export_attention(map: &FeatureMap, path: &Path) -> Result<()> {
    let [c, d, h, w] = map.values.dims4();
    if c != 1 {
        return Err(Error::Shape(format!("attention export needs 1 channel, got {c}")));
    }
    if let Some(v) = map.values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("attention value {v} outside [0, 1]")));
    }
    write_array(path, &[d, h, w], map.values.data().to_vec(), [1.0; 3], "attention")
}

/// Write a channel stack as a 4D volume (channels on the 4th NIfTI axis).
/// Distances are stored as f64, everything else as u8 / f32 as appropriate.
pub fn save_stack(stack: &ChannelMapStack, path: &Path) -> Result<()> {
    let [c, d, h, w] = stack.values().dims4();
    let shape = [c, d, h, w];
    let descrip = stack.role().to_string();
    match stack.role() {
        MapRole::OneHot | MapRole::Contour => {
            let data = stack.values().data().iter().map(|&v| v as u8).collect();
            write_array(path, &shape, data, [1.0; 3], &descrip)
        }
        MapRole::Probability => {
            let data = stack.values().data().iter().map(|&v| v as f32).collect();
            write_array(path, &shape, data, [1.0; 3], &descrip)
        }
        MapRole::Distance => write_array(path, &shape, stack.values().data().to_vec(), [1.0; 3], &descrip),
    }
}

/// Read a stack written by [`save_stack`], re-validating its role invariants.
pub fn load_stack(path: &Path, role: MapRole) -> Result<ChannelMapStack> {
    let raw = read_raw(path, true)?;
    if raw.descrip != role.to_string() {
        return Err(Error::WrongRole {
            expected: role.to_string(),
            found: raw.descrip,
        });
    }
    let c = raw.channels.unwrap_or(1);
    let [d, h, w] = raw.dims.as_array();
    let values = Tensor::from_vec(&[c, d, h, w], raw.data)?;
    ChannelMapStack::new(role, values)
}
