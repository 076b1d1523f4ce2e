use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Channel attention applied after the OSA aggregation convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attention {
    None,
    /// Two-layer squeeze-excitation with reduction ratio `OsaConfig::se_reduction`.
    Se,
    /// Single full-width gate layer.
    Ese,
}

impl FromStr for Attention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Attention::None),
            "se" => Ok(Attention::Se),
            "ese" => Ok(Attention::Ese),
            _ => Err(Error::Invalid(format!("unknown attention `{s}`"))),
        }
    }
}

impl fmt::Display for Attention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attention::None => "none",
            Attention::Se => "se",
            Attention::Ese => "ese",
        })
    }
}

/// One backbone stage: `module_count` OSA modules of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct OsaConfig {
    /// Sequential convolutions per module (5 base, 3 lite).
    pub conv_count: usize,
    pub conv_channels: usize,
    /// Width after the 1×1 aggregation convolution.
    pub out_channels: usize,
    pub module_count: usize,
    pub residual: bool,
    pub attention: Attention,
    pub se_reduction: usize,
    /// Spatial size of the sequential convolutions.
    pub kernel: usize,
}

impl OsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_count == 0 || self.module_count == 0 {
            return Err(Error::Invalid("OSA conv_count and module_count must be >= 1".into()));
        }
        if self.conv_channels == 0 || self.out_channels == 0 || self.se_reduction == 0 {
            return Err(Error::Invalid("OSA widths and se_reduction must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Invalid(format!("OSA kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    V19,
    V39,
    V57,
    V99,
}

impl Variant {
    /// Modules per stage and convolutions per module.
    pub fn layout(self) -> ([usize; 4], usize) {
        match self {
            Variant::V19 => ([1, 1, 1, 1], 3),
            Variant::V39 => ([1, 1, 2, 2], 5),
            Variant::V57 => ([1, 1, 4, 3], 5),
            Variant::V99 => ([1, 3, 9, 3], 5),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "V2-19" | "19" => Ok(Variant::V19),
            "V2-39" | "39" => Ok(Variant::V39),
            "V2-57" | "57" => Ok(Variant::V57),
            "V2-99" | "99" => Ok(Variant::V99),
            _ => Err(Error::Invalid(format!("unknown backbone variant `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::V19 => "V2-19",
            Variant::V39 => "V2-39",
            Variant::V57 => "V2-57",
            Variant::V99 => "V2-99",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub stem: [usize; 3],
    /// Stages producing C2..C5 at strides 4, 8, 16, 32.
    pub stages: [OsaConfig; 4],
    pub fpn_channels: usize,
}

const CONV_WIDTHS: [usize; 4] = [128, 160, 192, 224];
const OUT_WIDTHS: [usize; 4] = [256, 512, 768, 1024];

impl BackboneConfig {
    pub fn new(variant: Variant, lite: bool) -> Self {
        let (modules, conv_count) = variant.layout();
        let stages = std::array::from_fn(|i| OsaConfig {
            conv_count,
            conv_channels: CONV_WIDTHS[i],
            out_channels: OUT_WIDTHS[i],
            module_count: modules[i],
            residual: true,
            attention: Attention::Ese,
            se_reduction: 16,
            kernel: 3,
        });
        BackboneConfig {
            variant,
            stem: [64, 64, 128],
            stages,
            fpn_channels: if lite { 128 } else { 256 },
        }
    }

    /// Output stride of stage `i` (0-based, C2..C5).
    pub fn stage_stride(i: usize) -> usize {
        1 << (i + 2)
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.stages[i].out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem.contains(&0) || self.fpn_channels == 0 {
            return Err(Error::Invalid("stem and FPN widths must be >= 1".into()));
        }
        self.stages.iter().try_for_each(OsaConfig::validate)
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::new(Variant::V39, false)
    }
}
