//! Dual-branch quality assessment network with interchangeable
//! unpaired-feature fusion (cosine, bottleneck, mutual attention), a tiny
//! semantic backbone, checkpoint serialization, and a gradient-check
//! battery covering every primitive and module.

pub mod backbone;
pub mod battery;
pub mod checkpoint;
mod error;
pub mod fusion;
mod model;
mod params;

pub use backbone::{Backbone, BackboneVars, DEFAULT_BACKBONE_WIDTHS};
pub use error::NetError;
pub use model::{ModelConfig, ModelVars, UnpairedIqaModel, DEFAULT_STAGE_WIDTHS, MIN_INPUT_EDGE};
pub use params::{
    BottleneckParams, BottleneckVars, ConvParams, ConvVars, FebParams, FebVars, FusionKind,
    FusionParams, FusionVars, LinearParams, LinearVars, MafeParams, MafeVars,
};
