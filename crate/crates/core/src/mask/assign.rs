use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AssignConfig {
    pub k0: i32,
    pub canonical: f64,
    pub k_min: u32,
    pub k_max: u32,
    /// Area-ratio rule instead of the canonical-size rule.
    pub adaptive: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            k0: 4,
            canonical: 224.0,
            k_min: 3,
            k_max: 5,
            adaptive: true,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3 <= self.k_min && self.k_min <= self.k_max && self.k_max <= 7) {
            return Err(Error::Invalid(format!(
                "level range P{}..P{} must satisfy 3 <= k_min <= k_max <= 7",
                self.k_min, self.k_max
            )));
        }
        if !(self.canonical.is_finite() && self.canonical > 0.0) {
            return Err(Error::Invalid("canonical size must be positive".into()));
        }
        Ok(())
    }

    fn clamp(&self, k: i64) -> u32 {
        k.clamp(self.k_min as i64, self.k_max as i64) as u32
    }

    /// Level for a `w × h` RoI in an image of `input_area` pixels, using the
    /// configured rule.
    pub fn assign(&self, w: f64, h: f64, input_area: f64) -> Result<u32> {
        if self.adaptive {
            assign_level_adaptive(w, h, input_area, self)
        } else {
            assign_level_canonical(w, h, self)
        }
    }
}

/// Largest integer `d` in [-128, 128] with `den · base^d <= num`; scaling
/// by powers of two is exact, so boundaries are not subject to rounding.
fn floor_log2_ratio(num: f64, den: f64, base: f64) -> i64 {
    let mut d = 0i64;
    while d > -128 && den * base.powi(d as i32) > num {
        d -= 1;
    }
    while d < 128 && den * base.powi(d as i32 + 1) <= num {
        d += 1;
    }
    d
}

fn positive(op: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{op}: extents must be positive, got {vals:?}")))
    }
}

/// `⌊k0 + log₂(√(wh)/canonical)⌋`, clamped to `[k_min, k_max]`.
pub fn assign_level_canonical(w: f64, h: f64, cfg: &AssignConfig) -> Result<u32> {
    positive("assign_level_canonical", &[w, h])?;
    // ⌊log₂(√(wh)/c)⌋ is the largest d with c²·4^d <= wh.
    let d = floor_log2_ratio(w * h, cfg.canonical * cfg.canonical, 4.0);
    Ok(cfg.clamp(cfg.k0 as i64 + d))
}

/// `⌈k_max − log₂(A_input / (wh))⌉`, clamped to `[k_min, k_max]`.
pub fn assign_level_adaptive(w: f64, h: f64, input_area: f64, cfg: &AssignConfig) -> Result<u32> {
    positive("assign_level_adaptive", &[w, h, input_area])?;
    // ⌈k − x⌉ = k − ⌊x⌋ for integer k.
    let d = floor_log2_ratio(input_area, w * h, 2.0);
    Ok(cfg.clamp(cfg.k_max as i64 - d))
}
