//! Contour- and distance-transform-guided attention network (CDA-Net) for
//! volumetric multi-structure segmentation.
//!
//! The crate is organised the way the data flows:
//!
//! * [`volume_io`] loads/saves NIfTI volumes, maps label codes to classes and
//!   synthesises phantoms for desk-scale experiments.
//! * [`preprocess`] windows, resamples and augments volumes and builds the
//!   contour and foreground distance-transform supervision targets.
//! * [`autodiff`] is the small reverse-mode engine the network is written in.
//! * [`network`] holds the backbone, V-transition blocks, auxiliary heads,
//!   the shape-aware attention and the ablation variants.
//! * [`losses`] and [`metrics`] are the supervision terms and evaluation.
//! * [`harness`] ties it all together: configs, folds, training, evaluation
//!   and ablation runs.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod preprocess;
pub mod tensor;
pub mod volume_io;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use volume_io::{ChannelMapStack, Dims, IntensityVolume, LabelMap, LabelVolume, MapRole};
