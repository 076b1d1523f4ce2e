//! VoVNetV2 backbone and the P3–P7 feature pyramid.

mod config;
mod fpn;
mod osa;
mod vovnet;

pub use config::{Attention, BackboneConfig, OsaConfig, Variant};
pub use fpn::{FeaturePyramid, Fpn};
pub use osa::{ese_forward, ese_param_count, se_forward, se_hidden, se_param_count, OsaModule};
pub use vovnet::VoVNet;
