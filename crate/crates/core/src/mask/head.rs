use rand::Rng;

use super::assign::AssignConfig;
use crate::backbone::FeaturePyramid;
use crate::boxes::{area, BBox};
use crate::error::{shape_err, Error, Result};
use crate::fcos::Detection;
use crate::params::{Bound, Conv, Deconv, Init, Linear, ParamStore};
use crate::tensor::{ReduceMode, RoiSample, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub conv_count: usize,
    pub channels: usize,
    pub classes: usize,
    /// Side of the pooled RoI feature; masks come out at twice this.
    pub roi_resolution: usize,
    pub sampling: usize,
    pub assign: AssignConfig,
    pub mask_threshold: f32,
    /// Predict per-class mask IoU and fold it into the score.
    pub mask_scoring: bool,
    pub maskiou_convs: usize,
    pub maskiou_fc: usize,
}

impl MaskConfig {
    pub fn new(classes: usize, lite: bool) -> Self {
        MaskConfig {
            conv_count: if lite { 2 } else { 4 },
            channels: if lite { 128 } else { 256 },
            classes,
            roi_resolution: 14,
            sampling: 2,
            assign: AssignConfig::default(),
            mask_threshold: 0.5,
            mask_scoring: true,
            maskiou_convs: if lite { 2 } else { 4 },
            maskiou_fc: if lite { 256 } else { 1024 },
        }
    }

    pub fn mask_resolution(&self) -> usize {
        2 * self.roi_resolution
    }

    pub fn validate(&self) -> Result<()> {
        self.assign.validate()?;
        let bad = |m: &str| Err(Error::Invalid(format!("mask config: {m}")));
        if self.classes == 0 || self.channels == 0 || self.maskiou_fc == 0 {
            return bad("classes, channels and maskiou_fc must be positive");
        }
        if self.roi_resolution < 2 || self.roi_resolution % 2 != 0 || self.sampling == 0 {
            return bad("roi_resolution must be even and >= 2, sampling >= 1");
        }
        if self.maskiou_convs == 0 {
            return bad("maskiou_convs must be positive");
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad("mask_threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

/// A box routed to one pyramid level for mask prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub bbox: BBox,
    pub level: u32,
    pub source: Detection,
}

impl Roi {
    /// Assigns `det` to a level; `None` for zero-area boxes.
    pub fn from_detection(
        det: &Detection,
        batch: usize,
        image_h: usize,
        image_w: usize,
        cfg: &AssignConfig,
    ) -> Result<Option<Roi>> {
        if area(&det.bbox) <= 0.0 {
            return Ok(None);
        }
        let [x1, y1, x2, y2] = det.bbox;
        let level = cfg.assign((x2 - x1) as f64, (y2 - y1) as f64, (image_h * image_w) as f64)?;
        Ok(Some(Roi {
            batch,
            bbox: det.bbox,
            level,
            source: det.clone(),
        }))
    }
}

/// Pools every RoI from its level into an R×C×out×out tensor. Boxes map to
/// feature coordinates as `v / 2^k − 0.5`, so pixel centers land on integers.
pub fn roi_align<T: Scalar>(
    tape: &mut Tape<T>,
    pyramid: &FeaturePyramid,
    rois: &[Roi],
    out: usize,
    sampling: usize,
) -> Result<Var> {
    let levels: Vec<Var> = pyramid.levels().iter().map(|&(_, v)| v).collect();
    let mut plans = Vec::with_capacity(rois.len());
    for roi in rois {
        let slot = pyramid
            .levels()
            .iter()
            .position(|&(k, _)| k == roi.level)
            .ok_or_else(|| shape_err("roi_align", format!("P{} missing from pyramid", roi.level)))?;
        let [_, _, fh, fw] = tape.value(levels[slot]).dims4()?;
        let s = FeaturePyramid::stride(roi.level) as f64;
        let b = roi.bbox.map(|v| v as f64 / s - 0.5);
        plans.push(RoiSample::plan(slot, roi.batch, fh, fw, b, out, sampling));
    }
    tape.roi_align(&levels, plans, out)
}

/// Spatial gate: `x ⊗ σ(conv3×3([max_c x, avg_c x]))` with a 1×2×3×3 kernel.
pub fn sam_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    if tape.shape(w) != [1, 2, 3, 3] {
        return Err(shape_err(
            "sam_forward",
            format!("kernel {:?} is not 1x2x3x3", tape.shape(w)),
        ));
    }
    let mx = tape.reduce_channel(x, ReduceMode::Max)?;
    let av = tape.reduce_channel(x, ReduceMode::Avg)?;
    let pooled = tape.concat_channels(&[mx, av])?;
    let logits = tape.conv2d(pooled, w, b, 1, 1)?;
    let gate = tape.sigmoid(logits)?;
    tape.scale_spatial(x, gate)
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    convs: Vec<Conv>,
    sam: Conv,
    deconv: Deconv,
    predictor: Conv,
}

impl MaskHead {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, in_channels: usize, cfg: &MaskConfig, rng: &mut R) -> Result<Self> {
        let mut convs = Vec::with_capacity(cfg.conv_count);
        let mut c = in_channels;
        for i in 0..cfg.conv_count {
            convs.push(Conv::new(
                store,
                &format!("mask.conv{i}"),
                c,
                cfg.channels,
                3,
                1,
                Init::He,
                rng,
            )?);
            c = cfg.channels;
        }
        let sam = Conv::new(store, "mask.sam", 2, 1, 3, 1, Init::Normal(0.01), rng)?;
        let deconv = Deconv::new(store, "mask.deconv", c, cfg.channels, Init::He, rng)?;
        let predictor = Conv::new(
            store,
            "mask.predictor",
            cfg.channels,
            cfg.classes,
            1,
            1,
            Init::Normal(0.001),
            rng,
        )?;
        Ok(MaskHead {
            convs,
            sam,
            deconv,
            predictor,
        })
    }

    /// R×C×n×n RoI features to R×K×2n×2n mask logits.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, feats: Var) -> Result<Var> {
        let mut x = feats;
        for conv in &self.convs {
            x = conv.forward_relu(tape, p, x)?;
        }
        let x = sam_forward(tape, x, p[self.sam.w], p[self.sam.b])?;
        let x = self.deconv.forward(tape, p, x)?;
        let x = tape.relu(x)?;
        self.predictor.forward(tape, p, x)
    }
}

/// Regresses the IoU of a predicted mask against its ground truth, per class.
#[derive(Clone, Debug)]
pub struct MaskIouHead {
    convs: Vec<Conv>,
    fcs: [Linear; 3],
}

impl MaskIouHead {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, in_channels: usize, cfg: &MaskConfig, rng: &mut R) -> Result<Self> {
        let mut convs = Vec::with_capacity(cfg.maskiou_convs);
        let mut c = in_channels + 1;
        for i in 0..cfg.maskiou_convs {
            let stride = if i + 1 == cfg.maskiou_convs { 2 } else { 1 };
            convs.push(Conv::new(
                store,
                &format!("maskiou.conv{i}"),
                c,
                cfg.channels,
                3,
                stride,
                Init::He,
                rng,
            )?);
            c = cfg.channels;
        }
        let side = cfg.roi_resolution.div_ceil(2);
        let fc = cfg.maskiou_fc;
        let fcs = [
            Linear::new(store, "maskiou.fc0", c * side * side, fc, Init::He, rng)?,
            Linear::new(store, "maskiou.fc1", fc, fc, Init::He, rng)?,
            Linear::new(store, "maskiou.fc2", fc, cfg.classes, Init::Normal(0.01), rng)?,
        ];
        Ok(MaskIouHead { convs, fcs })
    }

    /// `feats` R×C×n×n and `mask` R×1×2n×2n probabilities to R×K raw estimates.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, feats: Var, mask: Var) -> Result<Var> {
        let pooled = tape.max_pool(mask, 2, 2, 0)?;
        let mut x = tape.concat_channels(&[feats, pooled])?;
        for conv in &self.convs {
            x = conv.forward_relu(tape, p, x)?;
        }
        let [r, c, h, w] = tape.value(x).dims4()?;
        let x = tape.reshape(x, [r, c * h * w])?;
        let x = self.fcs[0].forward(tape, p, x)?;
        let x = tape.relu(x)?;
        let x = self.fcs[1].forward(tape, p, x)?;
        let x = tape.relu(x)?;
        self.fcs[2].forward(tape, p, x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaskOutput {
    /// R×C×n×n pooled features.
    pub feats: Var,
    /// R×K×2n×2n mask logits.
    pub logits: Var,
    /// R×K raw IoU estimates when mask scoring is on.
    pub iou: Option<Var>,
}

/// Mask head plus the optional mask-IoU head over a shared RoI pool.
#[derive(Clone, Debug)]
pub struct MaskBranch {
    cfg: MaskConfig,
    head: MaskHead,
    iou_head: Option<MaskIouHead>,
}

impl MaskBranch {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, in_channels: usize, cfg: &MaskConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let head = MaskHead::new(store, in_channels, cfg, rng)?;
        let iou_head = if cfg.mask_scoring {
            Some(MaskIouHead::new(store, in_channels, cfg, rng)?)
        } else {
            None
        };
        Ok(MaskBranch {
            cfg: cfg.clone(),
            head,
            iou_head,
        })
    }

    pub fn config(&self) -> &MaskConfig {
        &self.cfg
    }

    /// Runs the branch on non-empty `rois`. The IoU head sees the label-channel
    /// probabilities as a constant, so its loss does not reach the mask head.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
        rois: &[Roi],
    ) -> Result<MaskOutput> {
        self.forward_with(tape, p, pyramid, rois, None)
    }

    /// As [`MaskBranch::forward`], but the IoU head reads `iou_input` (R×1×M×M
    /// probabilities) when given, instead of the current predictions.
    pub fn forward_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
        rois: &[Roi],
        iou_input: Option<Tensor<T>>,
    ) -> Result<MaskOutput> {
        if rois.is_empty() {
            return Err(Error::Invalid("mask branch needs at least one RoI".into()));
        }
        let feats = roi_align(tape, pyramid, rois, self.cfg.roi_resolution, self.cfg.sampling)?;
        let logits = self.head.forward(tape, p, feats)?;
        let iou = match &self.iou_head {
            None => None,
            Some(h) => {
                let probs = match iou_input {
                    Some(t) => t,
                    None => {
                        let labels: Vec<usize> = rois.iter().map(|r| r.source.label).collect();
                        let chosen = tape.gather_channel(logits, &labels)?;
                        let v = tape.value(chosen);
                        Tensor::new(
                            v.shape().to_vec(),
                            v.data().iter().map(|&z| crate::tensor::kernels::sigmoid(z)).collect(),
                        )?
                    }
                };
                let mask = tape.constant(probs);
                Some(h.forward(tape, p, feats, mask)?)
            }
        };
        Ok(MaskOutput { feats, logits, iou })
    }
}
