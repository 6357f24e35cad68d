//! Shape-aware attention and the CBAM baseline.

use rand::Rng;

use super::layers::{bottleneck, Conv3d};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// `A = sigmoid(conv(concat(f_i, f_c, f_dt)))`, one channel, and
/// `f_o = f_i * A` broadcast over channels. Either shape input may be absent.
#[derive(Clone, Debug)]
pub struct ShapeAwareAttention {
    pub conv: Conv3d,
    pub feature_channels: usize,
    pub contour_channels: usize,
    pub distance_channels: usize,
}

impl ShapeAwareAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feature_channels: usize,
        contour_channels: usize,
        distance_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cin = feature_channels + contour_channels + distance_channels;
        Ok(Self {
            conv: Conv3d::new(store, &format!("{name}.conv"), cin, 1, 3, 1, true, rng)?,
            feature_channels,
            contour_channels,
            distance_channels,
        })
    }

    /// Returns `(f_o, A)`. `f_c` is the contour probability map, `f_dt` the
    /// distance prediction.
    pub fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        f_i: Var,
        f_c: Option<Var>,
        f_dt: Option<Var>,
    ) -> Result<(Var, Var)> {
        let spatial = t.value(f_i).shape()[1..].to_vec();
        let mut parts = vec![f_i];
        for (v, expected, what) in [
            (f_c, self.contour_channels, "contour"),
            (f_dt, self.distance_channels, "distance"),
        ] {
            match v {
                Some(v) => {
                    let shape = t.value(v).shape();
                    if shape[1..] != spatial[..] {
                        return Err(Error::Shape(format!(
                            "{what} features {:?} do not match input features {:?}",
                            &shape[1..],
                            spatial
                        )));
                    }
                    if shape[0] != expected {
                        return Err(Error::Shape(format!(
                            "{what} features have {} channels, expected {expected}",
                            shape[0]
                        )));
                    }
                    parts.push(v);
                }
                None if expected != 0 => {
                    return Err(Error::InvalidArgument(format!("{what} features required by this attention block")))
                }
                None => {}
            }
        }
        let cat = if parts.len() == 1 { f_i } else { t.concat(&parts) };
        let logits = self.conv.forward(t, s, cat);
        let a = t.sigmoid(logits);
        Ok((t.mul(f_i, a), a))
    }
}

/// Convolutional block attention: a channel gate from avg- and max-pooled
/// descriptors through a shared MLP, then a spatial gate from a 7x7x7 conv
/// over the channel-wise mean and max.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub fc1: Conv3d,
    pub fc2: Conv3d,
    pub spatial: Conv3d,
}

pub const CBAM_SPATIAL_KERNEL: usize = 7;

impl Cbam {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = bottleneck(channels);
        Ok(Self {
            fc1: Conv3d::new(store, &format!("{name}.fc1"), channels, hidden, 1, 1, true, rng)?,
            fc2: Conv3d::new(store, &format!("{name}.fc2"), hidden, channels, 1, 1, true, rng)?,
            spatial: Conv3d::new(store, &format!("{name}.spatial"), 2, 1, CBAM_SPATIAL_KERNEL, 1, true, rng)?,
        })
    }

    fn mlp(&self, t: &mut Tape, s: &ParamStore, z: Var) -> Var {
        let z = self.fc1.forward(t, s, z);
        let z = t.relu(z);
        self.fc2.forward(t, s, z)
    }

    /// Returns `(output, channel_gate [C,1,1,1], spatial_gate [1,D,H,W])`.
    pub fn forward_with_gates(&self, t: &mut Tape, s: &ParamStore, x: Var) -> (Var, Var, Var) {
        let avg = t.global_avg(x);
        let max = t.global_max(x);
        let a = self.mlp(t, s, avg);
        let m = self.mlp(t, s, max);
        let sum = t.add(a, m);
        let cg = t.sigmoid(sum);
        let x1 = t.mul(x, cg);
        let mean = t.channel_mean(x1);
        let cmax = t.channel_max(x1);
        let pooled = t.concat(&[mean, cmax]);
        let logits = self.spatial.forward(t, s, pooled);
        let sg = t.sigmoid(logits);
        (t.mul(x1, sg), cg, sg)
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        self.forward_with_gates(t, s, x).0
    }
}
