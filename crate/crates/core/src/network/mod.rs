//! The segmentation network: U-Net backbone, V-transition blocks, contour
//! and distance-transform heads, shape-aware attention and the CBAM
//! baseline, assembled per ablation variant.

mod attention;
mod layers;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use attention::{Cbam, ShapeAwareAttention, CBAM_SPATIAL_KERNEL};
pub use layers::{ChannelAttention, Conv3d, ConvBlock, InstanceNorm, SeparableConvBlock, TransitionHead, VTransition};
pub use model::{build_variant, Backbone, BackboneFeatures, BackboneVars, CdaNet, CdaOutput, ForwardVars, ModelVariantSpec, Variant};

/// What a feature map represents in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    /// Decoder features entering attention (`f_i`).
    Input,
    /// Contour logits or probabilities (`f_c`).
    Contour,
    /// Distance-transform regression (`f_dt`).
    Distance,
    /// Attention-weighted features (`f_o`).
    Output,
    /// Attention map `A`.
    Attention,
    /// Backbone features feeding the auxiliary heads.
    Encoder,
    /// Segmentation logits.
    Segmentation,
}

/// A `C x D x H x W` tensor tagged with its role.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub role: FeatureRole,
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(role: FeatureRole, values: Tensor) -> Self {
        Self { role, values }
    }

    /// Finite values; an attention map is additionally single-channel in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.values.shape().len() != 4 {
            return Err(Error::Shape(format!("feature map must be 4D, got {:?}", self.values.shape())));
        }
        if !self.values.all_finite() {
            return Err(Error::InvalidArgument(format!("{:?} feature map has non-finite values", self.role)));
        }
        if self.role == FeatureRole::Attention {
            if self.values.shape()[0] != 1 {
                return Err(Error::Shape(format!("attention map must have 1 channel, got {}", self.values.shape()[0])));
            }
            if self.values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("attention values outside [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}
