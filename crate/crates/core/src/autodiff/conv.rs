//! Grouped 3D convolution with "same" zero padding and unit stride.
//!
//! Lowered to GEMM over depth slabs: each slab is unfolded (im2col) into a
//! `[cin_g * k^3, slab_voxels]` matrix and multiplied by the per-group weight
//! matrix `[cout_g, cin_g * k^3]`.

use crate::tensor::Tensor;

/// Upper bound on the number of elements of one im2col buffer.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    groups: usize,
    k: usize,
    d: usize,
    h: usize,
    w: usize,
}

impl Geometry {
    fn new(x: &Tensor, weight: &Tensor, groups: usize) -> Self {
        let [cin, d, h, w] = x.dims4();
        let ws = weight.shape();
        assert_eq!(ws.len(), 5, "conv weight must be [cout, cin/g, k, k, k]");
        assert_eq!(cin % groups, 0);
        assert_eq!(ws[1] * groups, cin, "weight/input channel mismatch");
        assert!(ws[2] == ws[3] && ws[3] == ws[4] && ws[2] % 2 == 1);
        Self {
            cin,
            cout: ws[0],
            groups,
            k: ws[2],
            d,
            h,
            w,
        }
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn rows(&self) -> usize {
        self.cin_g() * self.taps()
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn volume(&self) -> usize {
        self.d * self.h * self.w
    }

    fn slab_depth(&self) -> usize {
        let per_slice = self.rows() * self.plane();
        (COL_BUDGET / per_slice.max(1)).clamp(1, self.d)
    }
}

/// Unfold depth slices `[d0, d1)` of group `g` into `col`.
fn im2col(x: &[f64], geo: &Geometry, g: usize, d0: usize, d1: usize, col: &mut [f64]) {
    let (k, p) = (geo.k, geo.k / 2);
    let (h_len, w_len) = (geo.h, geo.w);
    let n = (d1 - d0) * geo.plane();
    let vol = geo.volume();
    for ci in 0..geo.cin_g() {
        let src = &x[(g * geo.cin_g() + ci) * vol..][..vol];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst_row = &mut col[row * n..(row + 1) * n];
                    let w_lo = p.saturating_sub(kw);
                    let w_hi = (w_len + p).saturating_sub(kw).min(w_len);
                    for d in d0..d1 {
                        let sd = d as isize + kd as isize - p as isize;
                        for h in 0..h_len {
                            let dst = &mut dst_row[((d - d0) * h_len + h) * w_len..][..w_len];
                            let sh = h as isize + kh as isize - p as isize;
                            if sd < 0 || sd >= geo.d as isize || sh < 0 || sh >= h_len as isize || w_lo >= w_hi {
                                dst.fill(0.0);
                                continue;
                            }
                            let base = (sd as usize * h_len + sh as usize) * w_len;
                            dst[..w_lo].fill(0.0);
                            dst[w_hi..].fill(0.0);
                            let s0 = base + w_lo + kw - p;
                            dst[w_lo..w_hi].copy_from_slice(&src[s0..s0 + (w_hi - w_lo)]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of [`im2col`].
fn col2im(col: &[f64], geo: &Geometry, g: usize, d0: usize, d1: usize, dx: &mut [f64]) {
    let (k, p) = (geo.k, geo.k / 2);
    let (h_len, w_len) = (geo.h, geo.w);
    let n = (d1 - d0) * geo.plane();
    let vol = geo.volume();
    for ci in 0..geo.cin_g() {
        let dst = &mut dx[(g * geo.cin_g() + ci) * vol..][..vol];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src_row = &col[row * n..(row + 1) * n];
                    let w_lo = p.saturating_sub(kw);
                    let w_hi = (w_len + p).saturating_sub(kw).min(w_len);
                    if w_lo >= w_hi {
                        continue;
                    }
                    for d in d0..d1 {
                        let sd = d as isize + kd as isize - p as isize;
                        if sd < 0 || sd >= geo.d as isize {
                            continue;
                        }
                        for h in 0..h_len {
                            let sh = h as isize + kh as isize - p as isize;
                            if sh < 0 || sh >= h_len as isize {
                                continue;
                            }
                            let src = &src_row[((d - d0) * h_len + h) * w_len..][..w_len];
                            let base = (sd as usize * h_len + sh as usize) * w_len + w_lo + kw - p;
                            for (o, v) in dst[base..base + (w_hi - w_lo)]
                                .iter_mut()
                                .zip(&src[w_lo..w_hi])
                            {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, groups: usize) -> Tensor {
    let geo = Geometry::new(x, weight, groups);
    let vol = geo.volume();
    let mut y = Tensor::zeros(&[geo.cout, geo.d, geo.h, geo.w]);
    let (cin_g, cout_g, rows) = (geo.cin_g(), geo.cout_g(), geo.rows());
    let wdata = weight.data();
    let xdata = x.data();
    if geo.k == 1 {
        for g in 0..groups {
            gemm(
                cout_g,
                cin_g,
                vol,
                &wdata[g * cout_g * rows..],
                rows,
                1,
                &xdata[g * cin_g * vol..],
                vol,
                1,
                0.0,
                &mut y.data_mut()[g * cout_g * vol..],
                vol,
                1,
            );
        }
    } else {
        let slab = geo.slab_depth();
        let mut col = vec![0.0; rows * slab * geo.plane()];
        for g in 0..groups {
            let mut d0 = 0;
            while d0 < geo.d {
                let d1 = (d0 + slab).min(geo.d);
                let n = (d1 - d0) * geo.plane();
                im2col(xdata, &geo, g, d0, d1, &mut col);
                gemm(
                    cout_g,
                    rows,
                    n,
                    &wdata[g * cout_g * rows..],
                    rows,
                    1,
                    &col,
                    n,
                    1,
                    0.0,
                    &mut y.data_mut()[g * cout_g * vol + d0 * geo.plane()..],
                    vol,
                    1,
                );
                d0 = d1;
            }
        }
    }
    if let Some(b) = bias {
        for (c, &bv) in b.data().iter().enumerate() {
            y.channel_mut(c).iter_mut().for_each(|v| *v += bv);
        }
    }
    y
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub(crate) fn backward(x: &Tensor, weight: &Tensor, groups: usize, dy: &Tensor, need_dx: bool) -> ConvGrads {
    let geo = Geometry::new(x, weight, groups);
    let vol = geo.volume();
    let (cin_g, cout_g, rows) = (geo.cin_g(), geo.cout_g(), geo.rows());
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let db = Tensor::from_vec(
        &[geo.cout],
        (0..geo.cout).map(|c| dy.channel(c).iter().sum()).collect(),
    )
    .expect("bias gradient shape");
    let (xdata, wdata, dydata) = (x.data(), weight.data(), dy.data());

    if geo.k == 1 {
        for g in 0..groups {
            // dW_g = dY_g * X_g^T
            gemm(
                cout_g,
                vol,
                cin_g,
                &dydata[g * cout_g * vol..],
                vol,
                1,
                &xdata[g * cin_g * vol..],
                1,
                vol,
                0.0,
                &mut dw.data_mut()[g * cout_g * rows..],
                rows,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                // dX_g = W_g^T * dY_g
                gemm(
                    cin_g,
                    cout_g,
                    vol,
                    &wdata[g * cout_g * rows..],
                    1,
                    rows,
                    &dydata[g * cout_g * vol..],
                    vol,
                    1,
                    0.0,
                    &mut dx.data_mut()[g * cin_g * vol..],
                    vol,
                    1,
                );
            }
        }
        return ConvGrads { dx, dw, db };
    }

    let slab = geo.slab_depth();
    let mut col = vec![0.0; rows * slab * geo.plane()];
    let mut dcol = if need_dx {
        vec![0.0; rows * slab * geo.plane()]
    } else {
        Vec::new()
    };
    for g in 0..groups {
        let mut d0 = 0;
        while d0 < geo.d {
            let d1 = (d0 + slab).min(geo.d);
            let n = (d1 - d0) * geo.plane();
            let dy_off = g * cout_g * vol + d0 * geo.plane();
            im2col(xdata, &geo, g, d0, d1, &mut col);
            gemm(
                cout_g,
                n,
                rows,
                &dydata[dy_off..],
                vol,
                1,
                &col,
                1,
                n,
                1.0,
                &mut dw.data_mut()[g * cout_g * rows..],
                rows,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    rows,
                    cout_g,
                    n,
                    &wdata[g * cout_g * rows..],
                    1,
                    rows,
                    &dydata[dy_off..],
                    vol,
                    1,
                    0.0,
                    &mut dcol,
                    n,
                    1,
                );
                col2im(&dcol, &geo, g, d0, d1, dx.data_mut());
            }
            d0 = d1;
        }
    }
    ConvGrads { dx, dw, db }
}
