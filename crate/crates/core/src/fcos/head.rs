use rand::Rng;

use crate::backbone::FeaturePyramid;
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, Conv, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub tower_depth: usize,
    pub tower_channels: usize,
    pub classes: usize,
    /// Combined-score cutoff applied before suppression.
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub max_detections_train: usize,
    pub max_detections_infer: usize,
    /// Candidates kept per level before suppression.
    pub pre_nms_top_n: usize,
    /// Use `sqrt(p_cls · p_ctr)` instead of the plain product.
    pub sqrt_score: bool,
    /// Multiply centerness into the score before ranking and suppression
    /// (otherwise after).
    pub centerness_before_nms: bool,
    /// Location of a cell's sample point as a fraction of the stride.
    pub location_offset: f32,
    /// Initial foreground probability of the classification bias.
    pub prior_prob: f32,
}

impl HeadConfig {
    pub fn new(classes: usize, lite: bool) -> Self {
        HeadConfig {
            tower_depth: if lite { 2 } else { 4 },
            tower_channels: if lite { 128 } else { 256 },
            classes,
            score_threshold: 0.03,
            nms_iou: 0.6,
            max_detections_train: 100,
            max_detections_infer: 50,
            pre_nms_top_n: 1000,
            sqrt_score: false,
            centerness_before_nms: true,
            location_offset: 0.5,
            prior_prob: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("head config: {m}")));
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return bad("score_threshold must lie in (0, 1)");
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return bad("nms_iou must lie in (0, 1)");
        }
        if self.max_detections_train == 0 || self.max_detections_infer == 0 || self.pre_nms_top_n == 0 {
            return bad("detection budgets must be positive");
        }
        if self.classes == 0 || self.tower_channels == 0 {
            return bad("classes and tower_channels must be positive");
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad("prior_prob must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Raw head outputs for one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub level: u32,
    /// N×K×H×W classification logits.
    pub cls: Var,
    /// N×1×H×W centerness logits.
    pub ctr: Var,
    /// N×4×H×W positive (l, t, r, b) offsets in input pixels.
    pub reg: Var,
}

/// Sample points of a level: cell (i, j) maps to `(off + j·s, off + i·s)` with
/// `s = 2^k` and `off = offset · s`, listed row-major.
pub fn location_grid(k: u32, h: usize, w: usize, offset: f32) -> Vec<(f32, f32)> {
    let s = (1u32 << k) as f32;
    let off = offset * s;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push((off + j as f32 * s, off + i as f32 * s));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct FcosHead {
    cfg: HeadConfig,
    in_channels: usize,
    cls_tower: Vec<Conv>,
    box_tower: Vec<Conv>,
    cls_logits: Conv,
    bbox_pred: Conv,
    centerness: Conv,
    /// Learnable per-level regression scale for P3..P7.
    scales: Vec<(u32, ParamId)>,
}

impl FcosHead {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, in_channels: usize, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut towers = [Vec::new(), Vec::new()];
        for (t, tower) in ["cls", "box"].iter().zip(towers.iter_mut()) {
            let mut c = in_channels;
            for i in 0..cfg.tower_depth {
                tower.push(Conv::new(
                    store,
                    &format!("head.{t}_tower{i}"),
                    c,
                    cfg.tower_channels,
                    3,
                    1,
                    Init::He,
                    rng,
                )?);
                c = cfg.tower_channels;
            }
        }
        let tower_out = if cfg.tower_depth == 0 {
            in_channels
        } else {
            cfg.tower_channels
        };
        let cls_logits = Conv::new(
            store,
            "head.cls_logits",
            tower_out,
            cfg.classes,
            3,
            1,
            Init::Normal(0.01),
            rng,
        )?;
        let prior = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
        store
            .get_mut(cls_logits.b)
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = prior);
        let bbox_pred = Conv::new(store, "head.bbox_pred", tower_out, 4, 3, 1, Init::Normal(0.01), rng)?;
        let centerness = Conv::new(store, "head.centerness", tower_out, 1, 3, 1, Init::Normal(0.01), rng)?;
        let scales = (3..=7)
            .map(|k| Ok((k, store.add(format!("head.scale{k}"), Tensor::scalar(1.0))?)))
            .collect::<Result<_>>()?;
        let [cls_tower, box_tower] = towers;
        Ok(FcosHead {
            cfg: cfg.clone(),
            in_channels,
            cls_tower,
            box_tower,
            cls_logits,
            bbox_pred,
            centerness,
            scales,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    /// Runs the shared towers on one pyramid level.
    pub fn forward_level<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, level: u32, x: Var) -> Result<LevelOutput> {
        let c = tape.value(x).dims4()?[1];
        if c != self.in_channels {
            return Err(shape_err(
                "head_forward",
                format!("level P{level} has {c} channels, head expects {}", self.in_channels),
            ));
        }
        let scale = self
            .scales
            .iter()
            .find(|(k, _)| *k == level)
            .map(|&(_, id)| id)
            .ok_or_else(|| Error::Invalid(format!("no regression scale for P{level}")))?;
        let mut hc = x;
        for conv in &self.cls_tower {
            hc = conv.forward_relu(tape, p, hc)?;
        }
        let mut hb = x;
        for conv in &self.box_tower {
            hb = conv.forward_relu(tape, p, hb)?;
        }
        let cls = self.cls_logits.forward(tape, p, hc)?;
        let ctr = self.centerness.forward(tape, p, hb)?;
        let raw = self.bbox_pred.forward(tape, p, hb)?;
        let scaled = tape.mul_scalar(raw, p[scale])?;
        let pos = tape.exp(scaled)?;
        let reg = tape.scale(pos, FeaturePyramid::stride(level) as f64)?;
        Ok(LevelOutput { level, cls, ctr, reg })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
    ) -> Result<Vec<LevelOutput>> {
        pyramid
            .levels()
            .iter()
            .map(|&(k, v)| self.forward_level(tape, p, k, v))
            .collect()
    }
}
