//! Parameterised building blocks. Each layer registers its tensors in a
//! [`ParamStore`] at construction and records its forward pass on a [`Tape`].

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Same-padded 3D convolution with odd kernel size.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "{name}: {in_channels} -> {out_channels} channels not divisible into {groups} groups"
            )));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("{name}: kernel size {kernel} must be odd")));
        }
        let cin_g = in_channels / groups;
        let fan_in = cin_g * kernel.pow(3);
        let weight = store.add_he(
            format!("{name}.weight"),
            &[out_channels, cin_g, kernel, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Ok(Self {
            weight,
            bias,
            groups,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        assert_eq!(t.value(x).shape()[0], self.in_channels, "conv input channels");
        let w = t.param(s, self.weight);
        let b = self.bias.map(|b| t.param(s, b));
        t.conv3d(x, w, b, self.groups)
    }

    pub fn param_count(&self, s: &ParamStore) -> usize {
        s.get(self.weight).len() + self.bias.map_or(0, |b| s.get(b).len())
    }
}

/// Instance normalisation with a per-channel affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let g = t.param(s, self.gamma);
        let b = t.param(s, self.beta);
        t.instance_norm(x, g, b, NORM_EPS)
    }
}

/// Two rounds of 3x3x3 conv, instance norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv1: Conv3d,
    norm1: InstanceNorm,
    conv2: Conv3d,
    norm2: InstanceNorm,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv3d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, false, rng)?,
            norm1: InstanceNorm::new(store, &format!("{name}.norm1"), cout),
            conv2: Conv3d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, false, rng)?,
            norm2: InstanceNorm::new(store, &format!("{name}.norm2"), cout),
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let y = self.conv1.forward(t, s, x);
        let y = self.norm1.forward(t, s, y);
        let y = t.relu(y);
        let y = self.conv2.forward(t, s, y);
        let y = self.norm2.forward(t, s, y);
        t.relu(y)
    }
}

/// Grouped 3x3x3 conv, pointwise conv, instance norm, ReLU.
#[derive(Clone, Debug)]
pub struct SeparableConvBlock {
    pub grouped: Conv3d,
    pub pointwise: Conv3d,
    pub norm: InstanceNorm,
}

impl SeparableConvBlock {
    /// `groups = None` makes the spatial conv fully depthwise.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        groups: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let groups = groups.unwrap_or(cin);
        Ok(Self {
            grouped: Conv3d::new(store, &format!("{name}.grouped"), cin, cin, 3, groups, false, rng)?,
            pointwise: Conv3d::new(store, &format!("{name}.pointwise"), cin, cout, 1, 1, false, rng)?,
            norm: InstanceNorm::new(store, &format!("{name}.norm"), cout),
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let y = self.grouped.forward(t, s, x);
        let y = self.pointwise.forward(t, s, y);
        let y = self.norm.forward(t, s, y);
        t.relu(y)
    }

    pub fn param_count(&self, s: &ParamStore) -> usize {
        self.grouped.param_count(s) + self.pointwise.param_count(s) + 2 * self.pointwise.out_channels
    }
}

/// Squeeze-and-excitation gate: global average, bottleneck MLP, sigmoid.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv3d,
    pub fc2: Conv3d,
}

pub(crate) fn bottleneck(channels: usize) -> usize {
    (channels / 4).max(1)
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = bottleneck(channels);
        Ok(Self {
            fc1: Conv3d::new(store, &format!("{name}.fc1"), channels, hidden, 1, 1, true, rng)?,
            fc2: Conv3d::new(store, &format!("{name}.fc2"), hidden, channels, 1, 1, true, rng)?,
        })
    }

    /// Per-channel weights `[C, 1, 1, 1]` in `(0, 1)`.
    pub fn gate(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let z = t.global_avg(x);
        let z = self.fc1.forward(t, s, z);
        let z = t.relu(z);
        let z = self.fc2.forward(t, s, z);
        t.sigmoid(z)
    }
}

/// Single-level encoder-decoder of separable conv blocks followed by
/// channel attention. Spatial size is preserved; every spatial dim must be
/// even.
#[derive(Clone, Debug)]
pub struct VTransition {
    pub enter: SeparableConvBlock,
    pub down: SeparableConvBlock,
    pub merge: SeparableConvBlock,
    pub attention: ChannelAttention,
}

impl VTransition {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            enter: SeparableConvBlock::new(store, &format!("{name}.enter"), cin, cout, None, rng)?,
            down: SeparableConvBlock::new(store, &format!("{name}.down"), cout, cout, None, rng)?,
            merge: SeparableConvBlock::new(store, &format!("{name}.merge"), cout, cout, None, rng)?,
            attention: ChannelAttention::new(store, &format!("{name}.attention"), cout, rng)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let [_, d, h, w] = t.value(x).dims4();
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("v-transition needs even spatial dims, got {d}x{h}x{w}")));
        }
        let a = self.enter.forward(t, s, x);
        let p = t.max_pool2(a);
        let b = self.down.forward(t, s, p);
        let up = t.resize(b, [d, h, w]);
        let sum = t.add(a, up);
        let y = self.merge.forward(t, s, sum);
        let g = self.attention.gate(t, s, y);
        Ok(t.mul(y, g))
    }
}

/// A V-transition followed by a pointwise projection with bias.
#[derive(Clone, Debug)]
pub struct TransitionHead {
    pub transition: VTransition,
    pub project: Conv3d,
}

impl TransitionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            transition: VTransition::new(store, &format!("{name}.transition"), cin, hidden, rng)?,
            project: Conv3d::new(store, &format!("{name}.project"), hidden, cout, 1, 1, true, rng)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let y = self.transition.forward(t, s, x)?;
        Ok(self.project.forward(t, s, y))
    }
}
