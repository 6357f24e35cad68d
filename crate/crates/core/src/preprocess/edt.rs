//! Exact Euclidean distance transforms.
//!
//! Separable lower-envelope algorithm: one pass of 1D squared-distance
//! transforms per axis, each linear in the row length. With unit spacing
//! every intermediate value is an integer, so the squared result is exact.

use crate::volume_io::Dims;

/// One site of a 1D lower envelope: a parabola `w2 * (x - pos)^2 + val`.
#[derive(Clone, Copy)]
struct Site {
    pos: f64,
    val: f64,
}

struct Envelope {
    sites: Vec<Site>,
    hull: Vec<Site>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn new() -> Self {
        Self {
            sites: Vec::new(),
            hull: Vec::new(),
            bounds: Vec::new(),
        }
    }

    /// `out[p] = min_q (w2 * (p - q)^2 + f[q])`; with `pad`, two extra zero
    /// sites sit just outside the row at `-1` and `n`.
    fn transform(&mut self, f: &[f64], w2: f64, pad: bool, out: &mut [f64]) {
        let n = f.len();
        self.sites.clear();
        if pad {
            self.sites.push(Site { pos: -1.0, val: 0.0 });
        }
        self.sites.extend(
            f.iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(q, &val)| Site { pos: q as f64, val }),
        );
        if pad {
            self.sites.push(Site { pos: n as f64, val: 0.0 });
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }

        let meet = |a: Site, b: Site| ((b.val + w2 * b.pos * b.pos) - (a.val + w2 * a.pos * a.pos)) / (2.0 * w2 * (b.pos - a.pos));
        self.hull.clear();
        self.bounds.clear();
        for &s in &self.sites {
            while let Some(&top) = self.hull.last() {
                let x = meet(top, s);
                if self.bounds.last().is_some_and(|&b| x <= b) {
                    self.hull.pop();
                    self.bounds.pop();
                } else {
                    self.bounds.push(x);
                    break;
                }
            }
            if self.hull.is_empty() {
                self.bounds.clear();
            }
            self.hull.push(s);
        }

        let mut k = 0;
        for (p, o) in out.iter_mut().enumerate() {
            let x = p as f64;
            while k < self.bounds.len() && self.bounds[k] < x {
                k += 1;
            }
            let s = self.hull[k];
            *o = w2 * (x - s.pos) * (x - s.pos) + s.val;
        }
    }
}

/// Squared distance from every voxel to the nearest feature voxel.
///
/// `spacing` weights the axes (`(D, H, W)` order). With
/// `border_is_feature`, the one-voxel shell just outside the volume counts as
/// feature. Voxels with no reachable feature get `+inf`.
pub fn squared_edt(features: &[bool], dims: Dims, spacing: [f64; 3], border_is_feature: bool) -> Vec<f64> {
    assert_eq!(features.len(), dims.len());
    let mut g: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let mut env = Envelope::new();
    let [d, h, w] = dims.as_array();
    let longest = d.max(h).max(w);
    let mut row = vec![0.0; longest];
    let mut out = vec![0.0; longest];

    // W axis: contiguous rows.
    let w2 = spacing[2] * spacing[2];
    for r in g.chunks_mut(w) {
        row[..w].copy_from_slice(r);
        env.transform(&row[..w], w2, border_is_feature, &mut out[..w]);
        r.copy_from_slice(&out[..w]);
    }
    // H axis.
    let w2 = spacing[1] * spacing[1];
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                row[y] = g[dims.index(z, y, x)];
            }
            env.transform(&row[..h], w2, border_is_feature, &mut out[..h]);
            for y in 0..h {
                g[dims.index(z, y, x)] = out[y];
            }
        }
    }
    // D axis.
    let w2 = spacing[0] * spacing[0];
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                row[z] = g[dims.index(z, y, x)];
            }
            env.transform(&row[..d], w2, border_is_feature, &mut out[..d]);
            for z in 0..d {
                g[dims.index(z, y, x)] = out[z];
            }
        }
    }
    g
}

/// Foreground distance transform: each foreground voxel holds the Euclidean
/// distance (voxels) to the nearest background voxel, with the volume border
/// treated as background. Background voxels hold 0.
pub fn foreground_distance(mask: &[bool], dims: Dims) -> Vec<f64> {
    let background: Vec<bool> = mask.iter().map(|&m| !m).collect();
    squared_edt(&background, dims, [1.0; 3], true)
        .into_iter()
        .map(f64::sqrt)
        .collect()
}

/// All-pairs reference for [`foreground_distance`] with the same border
/// convention. Quadratic in the voxel count; meant for verification only.
pub fn edt_bruteforce(mask: &[bool], dims: Dims) -> Vec<f64> {
    assert_eq!(mask.len(), dims.len());
    let extent = dims.as_array();
    let background: Vec<[usize; 3]> = (0..dims.len()).filter(|&i| !mask[i]).map(|i| dims.coords(i)).collect();
    (0..dims.len())
        .map(|i| {
            if !mask[i] {
                return 0.0;
            }
            let p = dims.coords(i);
            // Nearest voxel of the padded shell is the perpendicular one.
            let border = (0..3).map(|a| (p[a] + 1).min(extent[a] - p[a])).min().expect("3 axes");
            let mut best = (border * border) as f64;
            for q in &background {
                let d2: f64 = (0..3).map(|a| (p[a] as f64 - q[a] as f64).powi(2)).sum();
                best = best.min(d2);
            }
            best.sqrt()
        })
        .collect()
}
