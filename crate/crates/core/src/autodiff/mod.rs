//! Tape-based reverse-mode automatic differentiation over `[C, D, H, W]`
//! tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for the parameters that were pulled in through [`Tape::param`].
//! Tapes are single-use: build a new one per forward pass.

pub(crate) mod conv;
mod params;
pub(crate) mod resample;

pub use params::{Param, ParamGrads, ParamId, ParamStore};

use crate::tensor::Tensor;
use resample::Tap;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, groups: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    ResizeAxis { x: Var, axis: usize, taps: Vec<Tap> },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    GlobalAvg(Var),
    GlobalMax { x: Var, argmax: Vec<usize> },
    ChannelMean(Var),
    ChannelMax { x: Var, argmax: Vec<usize> },
    Softmax(Var),
    Linear(Vec<(Var, f64)>),
    Fused { inputs: Vec<Var>, grads: Vec<Tensor> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient w.r.t. an arbitrary node, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

/// Broadcast strides of `b` against the 4D shape of `a` (0 on size-1 axes).
fn broadcast_strides(a: &[usize], b: &[usize]) -> [usize; 4] {
    assert_eq!(a.len(), 4);
    assert_eq!(b.len(), 4, "broadcast operand must be 4D");
    let mut strides = [0usize; 4];
    let mut s = 1;
    for i in (0..4).rev() {
        assert!(b[i] == a[i] || b[i] == 1, "cannot broadcast {b:?} into {a:?}");
        strides[i] = if b[i] == 1 { 0 } else { s };
        s *= b[i];
    }
    strides
}

fn for_each_broadcast(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let st = broadcast_strides(a_shape, b_shape);
    let mut i = 0;
    for c in 0..a_shape[0] {
        for d in 0..a_shape[1] {
            for h in 0..a_shape[2] {
                let base = c * st[0] + d * st[1] + h * st[2];
                for w in 0..a_shape[3] {
                    f(i, base + w * st[3]);
                    i += 1;
                }
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_tensor(t: &Tensor) -> Tensor {
    t.map(sigmoid)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is tracked but which is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Var {
        let y = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), groups);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(y, Op::Conv { x, w, b, groups }, ng)
    }

    /// 2x2x2 max pooling with stride 2. All spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let [c, d, h, w] = self.value(x).dims4();
        assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((ci * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                    if xs[i] > best {
                                        best = xs[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let y = Tensor::from_vec(&[c, od, oh, ow], out).expect("pool shape");
        let ng = self.needs(x);
        self.push(y, Op::MaxPool { x, argmax }, ng)
    }

    /// Linear resampling of one spatial axis (1 = D, 2 = H, 3 = W).
    pub fn resize_axis(&mut self, x: Var, axis: usize, out_len: usize) -> Var {
        assert!((1..4).contains(&axis));
        let (y, taps) = resample::resize_axis(self.value(x), axis, out_len);
        let ng = self.needs(x);
        self.push(y, Op::ResizeAxis { x, axis, taps }, ng)
    }

    /// Trilinear resampling to the given spatial size.
    pub fn resize(&mut self, x: Var, size: [usize; 3]) -> Var {
        let mut v = x;
        for (axis, &len) in size.iter().enumerate() {
            if self.value(v).shape()[axis + 1] != len {
                v = self.resize_axis(v, axis + 1, len);
            }
        }
        v
    }

    /// Per-channel normalisation over the spatial axes with an affine
    /// `gamma`/`beta` of shape `[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.channel_len();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        let mut y = Tensor::zeros(xv.shape());
        for ci in 0..c {
            let ch = xv.channel(ci);
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ci] = is;
            let xh = &mut xhat[ci * n..(ci + 1) * n];
            let out = &mut y.data_mut()[ci * n..(ci + 1) * n];
            for ((o, h), &v) in out.iter_mut().zip(xh.iter_mut()).zip(ch) {
                *h = (v - mean) * is;
                *o = g[ci] * *h + b[ci];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(y, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = sigmoid_tensor(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), ng)
    }

    /// Elementwise product; `b` may broadcast along size-1 axes of a 4D `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let mut y = av.clone();
        {
            let ys = y.data_mut();
            let bs = bv.data();
            for_each_broadcast(av.shape(), bv.shape(), |i, j| ys[i] *= bs[j]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::Mul(a, b), ng)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let first = self.value(xs[0]).shape().to_vec();
        let mut data = Vec::new();
        let mut c = 0;
        for &x in xs {
            let v = self.value(x);
            assert_eq!(&v.shape()[1..], &first[1..], "concat spatial mismatch");
            c += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = c;
        let y = Tensor::from_vec(&shape, data).expect("concat shape");
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push(y, Op::Concat(xs.to_vec()), ng)
    }

    /// Spatial mean per channel: `[C, D, H, W] -> [C, 1, 1, 1]`.
    pub fn global_avg(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.channel_len() as f64;
        let data = (0..c).map(|ci| xv.channel(ci).iter().sum::<f64>() / n).collect();
        let y = Tensor::from_vec(&[c, 1, 1, 1], data).expect("pool shape");
        let ng = self.needs(x);
        self.push(y, Op::GlobalAvg(x), ng)
    }

    /// Spatial max per channel: `[C, D, H, W] -> [C, 1, 1, 1]`.
    pub fn global_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let n = xv.channel_len();
        let mut data = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for ci in 0..c {
            let (i, &m) = xv
                .channel(ci)
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            data.push(m);
            argmax.push(ci * n + i);
        }
        let y = Tensor::from_vec(&[c, 1, 1, 1], data).expect("pool shape");
        let ng = self.needs(x);
        self.push(y, Op::GlobalMax { x, argmax }, ng)
    }

    /// Mean over channels: `[C, D, H, W] -> [1, D, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [c, d, h, w] = xv.dims4();
        let n = xv.channel_len();
        let mut out = vec![0.0; n];
        for ci in 0..c {
            for (o, v) in out.iter_mut().zip(xv.channel(ci)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= c as f64);
        let y = Tensor::from_vec(&[1, d, h, w], out).expect("pool shape");
        let ng = self.needs(x);
        self.push(y, Op::ChannelMean(x), ng)
    }

    /// Max over channels: `[C, D, H, W] -> [1, D, H, W]`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [c, d, h, w] = xv.dims4();
        let n = xv.channel_len();
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0usize; n];
        for ci in 0..c {
            for (i, &v) in xv.channel(ci).iter().enumerate() {
                if v > out[i] {
                    out[i] = v;
                    argmax[i] = ci * n + i;
                }
            }
        }
        let y = Tensor::from_vec(&[1, d, h, w], out).expect("pool shape");
        let ng = self.needs(x);
        self.push(y, Op::ChannelMax { x, argmax }, ng)
    }

    /// Softmax across the channel axis at every voxel.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax_channels(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::Softmax(x), ng)
    }

    /// `sum_i coeff_i * x_i` over same-shaped inputs.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut y = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, c) in terms {
            let xv = self.value(v);
            for (o, &a) in y.data_mut().iter_mut().zip(xv.data()) {
                *o += c * a;
            }
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(y, Op::Linear(terms.to_vec()), ng)
    }

    /// A scalar node whose gradients w.r.t. `inputs` were computed alongside
    /// its value (used for the fused loss terms).
    pub fn fused_scalar(&mut self, inputs: &[Var], value: f64, grads: Vec<Tensor>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (&v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(v).shape(), g.shape(), "fused gradient shape");
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                grads,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar `root`. Parameter gradients are sized
    /// after `store`.
    pub fn backward(&self, root: Var, store: &ParamStore) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = ParamGrads::zeros_like(store);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {
                    grads[idx] = Some(gy);
                }
                Op::Param(id) => {
                    params.accumulate(*id, &gy);
                    grads[idx] = Some(gy);
                }
                Op::Conv { x, w, b, groups } => {
                    let need_dx = self.needs(*x);
                    let cg = conv::backward(self.value(*x), self.value(*w), *groups, &gy, need_dx);
                    if let Some(dx) = cg.dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, cg.dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, cg.db);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (&i, &g) in argmax.iter().zip(gy.data()) {
                        dx.data_mut()[i] += g;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ResizeAxis { x, axis, taps } => {
                    let dx = resample::resize_axis_backward(&gy, self.value(*x).shape(), *axis, taps);
                    acc(&mut grads, *x, dx);
                }
                Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                    let xv = self.value(*x);
                    let c = xv.shape()[0];
                    let n = xv.channel_len();
                    let g = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ci in 0..c {
                        let gyc = &gy.data()[ci * n..(ci + 1) * n];
                        let xh = &xhat[ci * n..(ci + 1) * n];
                        let sum_dy: f64 = gyc.iter().sum();
                        let sum_dy_xh: f64 = gyc.iter().zip(xh).map(|(a, b)| a * b).sum();
                        dgamma[ci] = sum_dy_xh;
                        dbeta[ci] = sum_dy;
                        let k = g[ci] * inv_std[ci] / n as f64;
                        let dxc = &mut dx.data_mut()[ci * n..(ci + 1) * n];
                        for ((o, &dy), &h) in dxc.iter_mut().zip(gyc).zip(xh) {
                            *o = k * (n as f64 * dy - sum_dy - h * sum_dy_xh);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, Tensor::from_vec(&[c], dgamma).expect("shape"));
                    acc(&mut grads, *beta, Tensor::from_vec(&[c], dbeta).expect("shape"));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dx = gy;
                    for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = gy;
                    for (g, &s) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= s * (1.0 - s);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, gy.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, gy);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut da = gy.clone();
                        let (ds, bs) = (da.data_mut(), bv.data());
                        for_each_broadcast(av.shape(), bv.shape(), |i, j| ds[i] *= bs[j]);
                        acc(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(bv.shape());
                        let (ds, as_, gs) = (db.data_mut(), av.data(), gy.data());
                        for_each_broadcast(av.shape(), bv.shape(), |i, j| ds[j] += gs[i] * as_[i]);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let shape = self.value(x).shape().to_vec();
                        let n = self.value(x).len();
                        if self.needs(x) {
                            let g = Tensor::from_vec(&shape, gy.data()[off..off + n].to_vec()).expect("shape");
                            acc(&mut grads, x, g);
                        }
                        off += n;
                    }
                }
                Op::GlobalAvg(x) => {
                    let xv = self.value(*x);
                    let n = xv.channel_len();
                    let mut dx = Tensor::zeros(xv.shape());
                    for (ci, &g) in gy.data().iter().enumerate() {
                        dx.channel_mut(ci).fill(g / n as f64);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::GlobalMax { x, argmax } | Op::ChannelMax { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (&i, &g) in argmax.iter().zip(gy.data()) {
                        dx.data_mut()[i] += g;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ChannelMean(x) => {
                    let xv = self.value(*x);
                    let c = xv.shape()[0];
                    let mut dx = Tensor::zeros(xv.shape());
                    for ci in 0..c {
                        for (o, &g) in dx.channel_mut(ci).iter_mut().zip(gy.data()) {
                            *o = g / c as f64;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.shape()[0];
                    let n = y.channel_len();
                    let mut dx = Tensor::zeros(y.shape());
                    for i in 0..n {
                        let dot: f64 = (0..c).map(|ci| y.data()[ci * n + i] * gy.data()[ci * n + i]).sum();
                        for ci in 0..c {
                            let k = ci * n + i;
                            dx.data_mut()[k] = y.data()[k] * (gy.data()[k] - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Linear(terms) => {
                    for &(v, c) in terms {
                        if self.needs(v) {
                            acc(&mut grads, v, gy.map(|g| g * c));
                        }
                    }
                }
                Op::Fused { inputs, grads: local } => {
                    let s = gy.data()[0];
                    for (&v, g) in inputs.iter().zip(local) {
                        if self.needs(v) {
                            acc(&mut grads, v, g.map(|x| x * s));
                        }
                    }
                }
            }
        }
        Gradients { grads, params }
    }
}

/// Softmax across channels of a `[C, ...]` tensor.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let n = x.channel_len();
    let mut y = Tensor::zeros(x.shape());
    let (xs, ys) = (x.data(), y.data_mut());
    for i in 0..n {
        let m = (0..c).map(|ci| xs[ci * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for ci in 0..c {
            let e = (xs[ci * n + i] - m).exp();
            ys[ci * n + i] = e;
            s += e;
        }
        for ci in 0..c {
            ys[ci * n + i] /= s;
        }
    }
    y
}
