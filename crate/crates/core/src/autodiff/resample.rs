//! Separable linear resampling along one axis (half-pixel centres, edge
//! clamped), the building block of trilinear resizing.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

/// Interpolation taps mapping `in_len` samples onto `out_len` samples.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let t = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, t }
        })
        .collect()
}

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn resize_axis(x: &Tensor, axis: usize, out_len: usize) -> (Tensor, Vec<Tap>) {
    let (outer, len, inner) = split(x.shape(), axis);
    let taps = linear_taps(len, out_len);
    let mut shape = x.shape().to_vec();
    shape[axis] = out_len;
    let mut y = Tensor::zeros(&shape);
    let (xs, ys) = (x.data(), y.data_mut());
    for o in 0..outer {
        for (j, tap) in taps.iter().enumerate() {
            let dst = &mut ys[(o * out_len + j) * inner..][..inner];
            let a = &xs[(o * len + tap.lo) * inner..][..inner];
            let b = &xs[(o * len + tap.hi) * inner..][..inner];
            for ((d, &va), &vb) in dst.iter_mut().zip(a).zip(b) {
                *d = (1.0 - tap.t) * va + tap.t * vb;
            }
        }
    }
    (y, taps)
}

pub(crate) fn resize_axis_backward(dy: &Tensor, in_shape: &[usize], axis: usize, taps: &[Tap]) -> Tensor {
    let (outer, len, inner) = split(in_shape, axis);
    let out_len = taps.len();
    let mut dx = Tensor::zeros(in_shape);
    let (gs, dxs) = (dy.data(), dx.data_mut());
    for o in 0..outer {
        for (j, tap) in taps.iter().enumerate() {
            let src = &gs[(o * out_len + j) * inner..][..inner];
            for (i, &g) in src.iter().enumerate() {
                dxs[(o * len + tap.lo) * inner + i] += (1.0 - tap.t) * g;
                dxs[(o * len + tap.hi) * inner + i] += tap.t * g;
            }
        }
    }
    dx
}
