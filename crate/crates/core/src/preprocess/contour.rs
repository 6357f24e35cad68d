//! Contour targets from the 3D Prewitt gradient of binary masks.

use crate::volume_io::Dims;

/// 3-tap box sum along one axis with zero padding.
fn box3(src: &[i32], dims: Dims, axis: usize) -> Vec<i32> {
    let [d, h, w] = dims.as_array();
    let stride = match axis {
        0 => h * w,
        1 => w,
        _ => 1,
    };
    let len = dims.as_array()[axis];
    let mut out = vec![0; src.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = dims.index(z, y, x);
                let pos = [z, y, x][axis];
                let mut s = src[i];
                if pos > 0 {
                    s += src[i - stride];
                }
                if pos + 1 < len {
                    s += src[i + stride];
                }
                out[i] = s;
            }
        }
    }
    out
}

/// Central difference along one axis with zero padding.
fn diff(src: &[i32], dims: Dims, axis: usize) -> Vec<i32> {
    let [d, h, w] = dims.as_array();
    let stride = match axis {
        0 => h * w,
        1 => w,
        _ => 1,
    };
    let len = dims.as_array()[axis];
    let mut out = vec![0; src.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = dims.index(z, y, x);
                let pos = [z, y, x][axis];
                let next = if pos + 1 < len { src[i + stride] } else { 0 };
                let prev = if pos > 0 { src[i - stride] } else { 0 };
                out[i] = next - prev;
            }
        }
    }
    out
}

/// Prewitt gradient components `(g_d, g_h, g_w)` of a binary mask; each is a
/// central difference along its axis smoothed by 3-tap box sums along the
/// other two. Outside the volume counts as 0.
pub fn prewitt_gradient(mask: &[bool], dims: Dims) -> [Vec<i32>; 3] {
    let m: Vec<i32> = mask.iter().map(|&b| i32::from(b)).collect();
    let sw = box3(&m, dims, 2);
    let sh = box3(&m, dims, 1);
    let shw = box3(&sw, dims, 1);
    let sdw = box3(&sw, dims, 0);
    let sdh = box3(&sh, dims, 0);
    [diff(&shw, dims, 0), diff(&sdw, dims, 1), diff(&sdh, dims, 2)]
}

/// Voxels where the Prewitt gradient magnitude is nonzero.
pub fn contour_mask(mask: &[bool], dims: Dims) -> Vec<bool> {
    let [gd, gh, gw] = prewitt_gradient(mask, dims);
    (0..mask.len()).map(|i| gd[i] != 0 || gh[i] != 0 || gw[i] != 0).collect()
}
