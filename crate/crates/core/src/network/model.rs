use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{Cbam, ShapeAwareAttention};
use super::layers::{ConvBlock, TransitionHead};
use super::{FeatureMap, FeatureRole};
use crate::autodiff::{softmax_channels, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume_io::{ChannelMapStack, Dims, IntensityVolume, MapRole};

/// Ablation variants, named as in the results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Base,
    BaseCbam,
    BaseCtn,
    BaseDttn,
    BaseCtnDttn,
    BaseCtnDttnPenalty,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::BaseCbam,
        Variant::BaseCtn,
        Variant::BaseDttn,
        Variant::BaseCtnDttn,
        Variant::BaseCtnDttnPenalty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseCbam => "base+CBAM",
            Variant::BaseCtn => "base+CTN",
            Variant::BaseDttn => "base+DTTN",
            Variant::BaseCtnDttn => "base+CTN+DTTN",
            Variant::BaseCtnDttnPenalty => "base+CTN+DTTN+penalty",
        }
    }

    pub fn has_ctn(self) -> bool {
        matches!(self, Variant::BaseCtn | Variant::BaseCtnDttn | Variant::BaseCtnDttnPenalty)
    }

    pub fn has_dttn(self) -> bool {
        matches!(self, Variant::BaseDttn | Variant::BaseCtnDttn | Variant::BaseCtnDttnPenalty)
    }

    pub fn has_cbam(self) -> bool {
        self == Variant::BaseCbam
    }

    pub fn has_shape_attention(self) -> bool {
        self.has_ctn() || self.has_dttn()
    }

    pub fn has_penalty(self) -> bool {
        self == Variant::BaseCtnDttnPenalty
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelVariantSpec {
    pub variant: Variant,
    pub base_channels: usize,
    /// Number of pooling steps in the backbone.
    pub depth: usize,
    pub n_structures: usize,
    pub n_seg_classes: usize,
    /// `[D, H, W]` of the network input.
    pub input_size: [usize; 3],
    /// Seed for weight initialisation.
    #[serde(default)]
    pub seed: u64,
}

impl ModelVariantSpec {
    pub fn new(variant: Variant, n_structures: usize, input_size: [usize; 3]) -> Self {
        Self {
            variant,
            base_channels: 16,
            depth: 3,
            n_structures,
            n_seg_classes: n_structures + 1,
            input_size,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_structures == 0 {
            return Err(Error::Config("n_structures must be positive".into()));
        }
        if self.n_seg_classes != self.n_structures + 1 {
            return Err(Error::Config(format!(
                "n_seg_classes ({}) must equal n_structures + 1 ({})",
                self.n_seg_classes,
                self.n_structures + 1
            )));
        }
        if self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Config("base_channels and depth must be positive".into()));
        }
        let step = 1usize << self.depth;
        if self.input_size.iter().any(|&s| s == 0 || s % step != 0) {
            return Err(Error::Shape(format!(
                "input size {:?} must be divisible by 2^depth = {step}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> Dims {
        Dims::from_slice(&self.input_size).expect("3 entries")
    }

    /// Channels of the deepest encoder stage.
    pub fn deep_channels(&self) -> usize {
        self.base_channels << self.depth
    }
}

/// U-Net with `depth` pooling steps and `base_channels * 2^level` channels.
#[derive(Clone, Debug)]
pub struct Backbone {
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    depth: usize,
}

/// Backbone outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    /// Shallowest encoder stage, full resolution.
    pub low: Var,
    /// Deepest encoder stage resized to full resolution.
    pub high: Var,
    /// Full-resolution decoder output.
    pub dec: Var,
}

impl Backbone {
    fn new(store: &mut ParamStore, spec: &ModelVariantSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let b = spec.base_channels;
        let mut enc = Vec::with_capacity(spec.depth + 1);
        for level in 0..=spec.depth {
            let cin = if level == 0 { 1 } else { b << (level - 1) };
            enc.push(ConvBlock::new(store, &format!("backbone.enc{level}"), cin, b << level, rng)?);
        }
        let mut dec = Vec::with_capacity(spec.depth);
        for level in 0..spec.depth {
            let cin = (b << (level + 1)) + (b << level);
            dec.push(ConvBlock::new(store, &format!("backbone.dec{level}"), cin, b << level, rng)?);
        }
        Ok(Self {
            enc,
            dec,
            depth: spec.depth,
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<BackboneVars> {
        let [_, d, h, w] = t.value(x).dims4();
        let step = 1usize << self.depth;
        if d % step != 0 || h % step != 0 || w % step != 0 {
            return Err(Error::Shape(format!(
                "backbone input {d}x{h}x{w} not divisible by 2^depth = {step}"
            )));
        }
        let mut skips = Vec::with_capacity(self.depth + 1);
        let mut cur = x;
        for (level, block) in self.enc.iter().enumerate() {
            if level > 0 {
                cur = t.max_pool2(cur);
            }
            cur = block.forward(t, s, cur);
            skips.push(cur);
        }
        let deepest = cur;
        for level in (0..self.depth).rev() {
            let skip = skips[level];
            let [_, sd, sh, sw] = t.value(skip).dims4();
            let up = t.resize(cur, [sd, sh, sw]);
            let cat = t.concat(&[up, skip]);
            cur = self.dec[level].forward(t, s, cat);
        }
        let high = t.resize(deepest, [d, h, w]);
        Ok(BackboneVars {
            low: skips[0],
            high,
            dec: cur,
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub seg_logits: Var,
    pub contour_logits: Option<Var>,
    pub dt_pred: Option<Var>,
    pub attention: Option<Var>,
    pub backbone: BackboneVars,
}

/// Materialised outputs of [`CdaNet::cda_forward`].
#[derive(Clone, Debug)]
pub struct CdaOutput {
    pub seg_logits: FeatureMap,
    pub contour_logits: Option<FeatureMap>,
    pub dt_pred: Option<FeatureMap>,
    pub attention: Option<FeatureMap>,
}

impl CdaOutput {
    /// Per-voxel softmax over the segmentation classes.
    pub fn probabilities(&self) -> ChannelMapStack {
        let p = softmax_channels(&self.seg_logits.values);
        ChannelMapStack::new(MapRole::Probability, p).expect("softmax lies in [0, 1]")
    }
}

#[derive(Clone, Debug)]
pub struct BackboneFeatures {
    pub low: FeatureMap,
    pub high: FeatureMap,
    pub dec: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct CdaNet {
    spec: ModelVariantSpec,
    store: ParamStore,
    backbone: Backbone,
    ctn: Option<TransitionHead>,
    dttn: Option<TransitionHead>,
    attention: Option<ShapeAwareAttention>,
    cbam: Option<Cbam>,
    aggregate: TransitionHead,
}

/// Build a freshly initialised model for `spec`.
pub fn build_variant(spec: &ModelVariantSpec) -> Result<CdaNet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut store = ParamStore::new();
    let b = spec.base_channels;
    let n = spec.n_structures;
    let v = spec.variant;
    let backbone = Backbone::new(&mut store, spec, &mut rng)?;
    let ctn = if v.has_ctn() {
        Some(TransitionHead::new(&mut store, "ctn", b, b, n, &mut rng)?)
    } else {
        None
    };
    let dttn = if v.has_dttn() {
        Some(TransitionHead::new(&mut store, "dttn", spec.deep_channels(), b, n, &mut rng)?)
    } else {
        None
    };
    let attention = if v.has_shape_attention() {
        let nc = if v.has_ctn() { n } else { 0 };
        let nd = if v.has_dttn() { n } else { 0 };
        Some(ShapeAwareAttention::new(&mut store, "attention", b, nc, nd, &mut rng)?)
    } else {
        None
    };
    let cbam = if v.has_cbam() {
        Some(Cbam::new(&mut store, "cbam", b, &mut rng)?)
    } else {
        None
    };
    let aggregate = TransitionHead::new(&mut store, "final", b, b, spec.n_seg_classes, &mut rng)?;
    Ok(CdaNet {
        spec: spec.clone(),
        store,
        backbone,
        ctn,
        dttn,
        attention,
        cbam,
        aggregate,
    })
}

impl CdaNet {
    /// Rebuild a model and load saved parameters into it.
    pub fn from_params(spec: &ModelVariantSpec, params: &ParamStore) -> Result<Self> {
        let mut net = build_variant(spec)?;
        net.store.load_from(params)?;
        Ok(net)
    }

    pub fn spec(&self) -> &ModelVariantSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn shape_attention(&self) -> Option<&ShapeAwareAttention> {
        self.attention.as_ref()
    }

    pub fn cbam(&self) -> Option<&Cbam> {
        self.cbam.as_ref()
    }

    fn missing(&self, head: &'static str) -> Error {
        Error::MissingHead {
            variant: self.spec.variant.to_string(),
            head,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [1, self.spec.input_size[0], self.spec.input_size[1], self.spec.input_size[2]];
        if shape != want {
            return Err(Error::Shape(format!(
                "input {shape:?} does not match the configured size {want:?}"
            )));
        }
        Ok(())
    }

    /// Record the full forward pass on `t`. `input` is `[1, D, H, W]`.
    pub fn forward(&self, t: &mut Tape, input: Var) -> Result<ForwardVars> {
        self.check_input(t.value(input).shape())?;
        let s = &self.store;
        let bb = self.backbone.forward(t, s, input)?;
        let contour_logits = match &self.ctn {
            Some(h) => Some(h.forward(t, s, bb.low)?),
            None => None,
        };
        let dt_pred = match &self.dttn {
            Some(h) => Some(h.forward(t, s, bb.high)?),
            None => None,
        };
        let (f_o, attention) = if let Some(att) = &self.attention {
            let f_c = contour_logits.map(|c| t.sigmoid(c));
            let (f_o, a) = att.forward(t, s, bb.dec, f_c, dt_pred)?;
            (f_o, Some(a))
        } else if let Some(cbam) = &self.cbam {
            (cbam.forward(t, s, bb.dec), None)
        } else {
            (bb.dec, None)
        };
        let seg_logits = self.aggregate.forward(t, s, f_o)?;
        Ok(ForwardVars {
            seg_logits,
            contour_logits,
            dt_pred,
            attention,
            backbone: bb,
        })
    }

    pub fn cda_forward(&self, vol: &IntensityVolume) -> Result<CdaOutput> {
        self.cda_forward_tensor(&vol.to_tensor())
    }

    pub fn cda_forward_tensor(&self, input: &Tensor) -> Result<CdaOutput> {
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let v = self.forward(&mut t, x)?;
        let grab = |var: Option<Var>, role| var.map(|v| FeatureMap::new(role, t.value(v).clone()));
        Ok(CdaOutput {
            seg_logits: FeatureMap::new(FeatureRole::Segmentation, t.value(v.seg_logits).clone()),
            contour_logits: grab(v.contour_logits, FeatureRole::Contour),
            dt_pred: grab(v.dt_pred, FeatureRole::Distance),
            attention: grab(v.attention, FeatureRole::Attention),
        })
    }

    pub fn backbone_forward(&self, vol: &IntensityVolume) -> Result<BackboneFeatures> {
        let mut t = Tape::new();
        let x = t.constant(vol.to_tensor());
        let bb = self.backbone.forward(&mut t, &self.store, x)?;
        let grab = |v: Var, role| FeatureMap::new(role, t.value(v).clone());
        Ok(BackboneFeatures {
            low: grab(bb.low, FeatureRole::Encoder),
            high: grab(bb.high, FeatureRole::Encoder),
            dec: grab(bb.dec, FeatureRole::Input),
        })
    }

    fn run_head(&self, head: Option<&TransitionHead>, name: &'static str, feats: &FeatureMap, role: FeatureRole) -> Result<FeatureMap> {
        let head = head.ok_or_else(|| self.missing(name))?;
        let mut t = Tape::new();
        let x = t.constant(feats.values.clone());
        if t.value(x).shape()[0] != head.transition.enter.grouped.in_channels {
            return Err(Error::Shape(format!(
                "{name} expects {} input channels, got {}",
                head.transition.enter.grouped.in_channels,
                feats.channels()
            )));
        }
        let y = head.forward(&mut t, &self.store, x)?;
        Ok(FeatureMap::new(role, t.value(y).clone()))
    }

    /// Contour logits from the low-level backbone features.
    pub fn ctn_forward(&self, low_feats: &FeatureMap) -> Result<FeatureMap> {
        self.run_head(self.ctn.as_ref(), "CTN", low_feats, FeatureRole::Contour)
    }

    /// Distance-transform regression from the high-level backbone features.
    pub fn dttn_forward(&self, high_feats: &FeatureMap) -> Result<FeatureMap> {
        self.run_head(self.dttn.as_ref(), "DTTN", high_feats, FeatureRole::Distance)
    }
}
