use rand::Rng;

use super::config::BackboneConfig;
use super::osa::OsaModule;
use crate::error::{shape_err, Result};
use crate::params::{Bound, Conv, Init, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Debug)]
pub struct VoVNet {
    cfg: BackboneConfig,
    stem: [Conv; 3],
    stages: Vec<Vec<OsaModule>>,
}

impl VoVNet {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let [s0, s1, s2] = cfg.stem;
        // Stride 2, 1, 2: the stem leaves C2 at stride 4.
        let stem = [
            Conv::new(store, "backbone.stem.0", 3, s0, 3, 2, Init::He, rng)?,
            Conv::new(store, "backbone.stem.1", s0, s1, 3, 1, Init::He, rng)?,
            Conv::new(store, "backbone.stem.2", s1, s2, 3, 2, Init::He, rng)?,
        ];
        let mut stages = Vec::with_capacity(4);
        let mut c = s2;
        for (si, stage) in cfg.stages.iter().enumerate() {
            let mut modules = Vec::with_capacity(stage.module_count);
            for mi in 0..stage.module_count {
                let name = format!("backbone.stage{}.osa{mi}", si + 2);
                modules.push(OsaModule::new(store, &name, c, stage, rng)?);
                c = stage.out_channels;
            }
            stages.push(modules);
        }
        Ok(VoVNet {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn modules(&self) -> impl Iterator<Item = &OsaModule> {
        self.stages.iter().flatten()
    }

    /// Runs the stem and the four stages, returning C2, C3, C4, C5.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<[Var; 4]> {
        let [_, c, h, w] = tape.value(image).dims4()?;
        if c != 3 {
            return Err(shape_err(
                "backbone_forward",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(shape_err(
                "backbone_forward",
                format!("input {h}x{w} is not a positive multiple of 32"),
            ));
        }
        let mut x = image;
        for conv in &self.stem {
            x = conv.forward_relu(tape, p, x)?;
        }
        let mut outs = [x; 4];
        for (si, modules) in self.stages.iter().enumerate() {
            if si > 0 {
                x = tape.max_pool(x, 3, 2, 1)?;
            }
            for m in modules {
                x = m.forward(tape, p, x)?;
            }
            outs[si] = x;
        }
        Ok(outs)
    }
}
