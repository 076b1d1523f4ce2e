use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{Bound, Conv, Init, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

/// Pyramid levels k = 3..=7, each at stride 2^k.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    levels: Vec<(u32, Var)>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<(u32, Var)>) -> Self {
        FeaturePyramid { levels }
    }

    pub fn get(&self, k: u32) -> Option<Var> {
        self.levels.iter().find(|(l, _)| *l == k).map(|&(_, v)| v)
    }

    pub fn levels(&self) -> &[(u32, Var)] {
        &self.levels
    }

    pub fn stride(k: u32) -> usize {
        1 << k
    }
}

#[derive(Clone, Debug)]
pub struct Fpn {
    lateral: [Conv; 3],
    output: [Conv; 3],
    p6: Conv,
    p7: Conv,
    channels: usize,
}

impl Fpn {
    /// `inputs` are the channel widths of C3, C4, C5.
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, inputs: [usize; 3], channels: usize, rng: &mut R) -> Result<Self> {
        let lateral = [0, 1, 2].map(|i| {
            Conv::new(
                store,
                &format!("fpn.lateral{}", i + 3),
                inputs[i],
                channels,
                1,
                1,
                Init::He,
                rng,
            )
        });
        let [l3, l4, l5] = lateral;
        let lateral = [l3?, l4?, l5?];
        let output = [0, 1, 2].map(|i| {
            Conv::new(
                store,
                &format!("fpn.output{}", i + 3),
                channels,
                channels,
                3,
                1,
                Init::He,
                rng,
            )
        });
        let [o3, o4, o5] = output;
        let output = [o3?, o4?, o5?];
        let p6 = Conv::new(store, "fpn.p6", channels, channels, 3, 2, Init::He, rng)?;
        let p7 = Conv::new(store, "fpn.p7", channels, channels, 3, 2, Init::He, rng)?;
        Ok(Fpn {
            lateral,
            output,
            p6,
            p7,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Builds P3–P7 from C3, C4, C5 (strides 8, 16, 32).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, cs: [Var; 3]) -> Result<FeaturePyramid> {
        let [l3, l4, l5] = [0, 1, 2].map(|i| self.lateral[i].forward(tape, p, cs[i]));
        let (l3, l4, l5) = (l3?, l4?, l5?);
        let top5 = l5;
        let up5 = tape.upsample_nearest2x(top5)?;
        if tape.shape(up5) != tape.shape(l4) {
            return Err(shape_err(
                "fpn_forward",
                format!(
                    "C5 {:?} does not upsample onto C4 {:?}",
                    tape.shape(top5),
                    tape.shape(l4)
                ),
            ));
        }
        let top4 = tape.add(l4, up5)?;
        let up4 = tape.upsample_nearest2x(top4)?;
        if tape.shape(up4) != tape.shape(l3) {
            return Err(shape_err("fpn_forward", "C4 does not upsample onto C3"));
        }
        let top3 = tape.add(l3, up4)?;
        let p3 = self.output[0].forward(tape, p, top3)?;
        let p4 = self.output[1].forward(tape, p, top4)?;
        let p5 = self.output[2].forward(tape, p, top5)?;
        let p6 = self.p6.forward(tape, p, p5)?;
        let p6_act = tape.relu(p6)?;
        let p7 = self.p7.forward(tape, p, p6_act)?;
        Ok(FeaturePyramid::new(vec![(3, p3), (4, p4), (5, p5), (6, p6), (7, p7)]))
    }
}
