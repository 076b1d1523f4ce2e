use crate::boxes::{iou, BBox, BinaryMask};
use crate::data::Instance;
use crate::error::{shape_err, Error, Result};
use crate::fcos::Detection;
use crate::model::CenterMask;
use crate::params::Bound;
use crate::tensor::kernels::sigmoid;
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::targets::{fcos_assign_targets, grid_iou, mask_target, DEFAULT_RANGES};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Focal class-balance weight; `None` disables it.
    pub focal_alpha: Option<f64>,
    pub focal_gamma: f64,
    pub ranges: Vec<(f32, f32)>,
    /// Mask-branch RoIs per image: ground-truth boxes first, then matched
    /// detections by score.
    pub max_mask_rois: usize,
    /// Minimum box IoU for a detection to inherit a ground-truth mask.
    pub roi_match_iou: f32,
    /// Feed matched detections to the mask branch, not only ground truth.
    pub rois_from_detections: bool,
    /// Add the mask-IoU regression term to the total.
    pub maskiou_in_total: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: Some(0.25),
            focal_gamma: 2.0,
            ranges: DEFAULT_RANGES.to_vec(),
            max_mask_rois: 8,
            roi_match_iou: 0.5,
            rois_from_detections: true,
            maskiou_in_total: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub label: usize,
    pub mask: BinaryMask,
}

impl From<&Instance> for GroundTruth {
    fn from(i: &Instance) -> Self {
        GroundTruth {
            bbox: i.bbox,
            label: i.label.index(),
            mask: i.mask.clone(),
        }
    }
}

/// Loss terms of one training forward pass.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub cls: Var,
    pub ctr: Var,
    pub bbox: Var,
    pub mask: Var,
    pub maskiou: Option<Var>,
    pub total: Var,
    /// Measured mask IoUs the mask-IoU head regressed onto, one per RoI.
    pub maskiou_targets: Vec<f64>,
    /// R×1×M×M label-channel probabilities the mask-IoU head read.
    pub maskiou_input: Option<Tensor<f64>>,
    pub rois: usize,
}

/// Mask-IoU head inputs and targets held fixed. Both are otherwise
/// piecewise or gradient-detached functions of the parameters, so freezing
/// them turns the total loss into an ordinary differentiable function.
#[derive(Clone, Debug)]
pub struct FrozenMaskIou {
    pub targets: Vec<f64>,
    pub input: Tensor<f64>,
}

impl FrozenMaskIou {
    pub fn from_parts(parts: &LossParts) -> Option<Self> {
        parts.maskiou_input.as_ref().map(|input| FrozenMaskIou {
            targets: parts.maskiou_targets.clone(),
            input: input.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub cls: f64,
    pub ctr: f64,
    pub bbox: f64,
    pub mask: f64,
    pub maskiou: f64,
    pub total: f64,
}

impl LossParts {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).data()[0].as_f64();
        LossValues {
            cls: v(self.cls),
            ctr: v(self.ctr),
            bbox: v(self.bbox),
            mask: v(self.mask),
            maskiou: self.maskiou.map_or(0.0, v),
            total: v(self.total),
        }
    }
}

/// Unweighted sum of scalar terms; a non-finite term is reported by name.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, parts: &[(&str, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(name, v) in parts {
        let t = tape.value(v);
        if t.numel() != 1 {
            return Err(shape_err("total_loss", format!("term {name} is not a scalar")));
        }
        if !t.data()[0].as_f64().is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    acc.ok_or_else(|| Error::Invalid("total_loss of no terms".into()))
}

fn gt_roi(gt: &GroundTruth) -> Detection {
    Detection {
        bbox: gt.bbox,
        label: gt.label,
        score: 1.0,
        level: 0,
        centerness: 1.0,
    }
}

/// Detection, classification, centerness, box, mask and mask-IoU losses for
/// an N×3×H×W batch with ground truth `gts[n]`.
///
/// `frozen` replaces the mask-IoU head's input and targets.
pub fn training_loss<T: Scalar>(
    model: &CenterMask,
    tape: &mut Tape<T>,
    p: &Bound,
    images: Var,
    gts: &[Vec<GroundTruth>],
    cfg: &LossConfig,
    frozen: Option<&FrozenMaskIou>,
) -> Result<LossParts> {
    let [n, _, h, w] = tape.value(images).dims4()?;
    if gts.len() != n {
        return Err(shape_err(
            "training_loss",
            format!("{} annotations for {n} images", gts.len()),
        ));
    }
    let mcfg = &model.config().mask;
    let out = model.detect(tape, p, images)?;
    let shapes: Vec<(u32, usize, usize)> = out
        .levels
        .iter()
        .map(|lo| {
            let s = tape.shape(lo.cls);
            (lo.level, s[2], s[3])
        })
        .collect();
    let targets = gts
        .iter()
        .map(|g| {
            let boxes: Vec<(BBox, usize)> = g.iter().map(|t| (t.bbox, t.label)).collect();
            fcos_assign_targets(&boxes, &shapes, &cfg.ranges, model.config().head.location_offset)
        })
        .collect::<Result<Vec<_>>>()?;
    let npos: usize = targets.iter().map(|t| t.positives()).sum();
    let pos_norm = npos.max(1) as f64;
    let ctr_sum: f64 = targets
        .iter()
        .flat_map(|t| t.levels.iter().flat_map(|l| l.centerness.iter()))
        .map(|&c| c as f64)
        .sum();
    let ctr_norm = if ctr_sum > 0.0 { ctr_sum } else { 1.0 };

    let (mut cls, mut ctr, mut bbox) = (None, None, None);
    let add = |tape: &mut Tape<T>, acc: Option<Var>, v: Var| -> Result<Option<Var>> {
        Ok(Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        }))
    };
    for (li, lo) in out.levels.iter().enumerate() {
        let (_, lh, lw) = shapes[li];
        let pl = lh * lw;
        let mut labels = Vec::with_capacity(n * pl);
        let mut ctr_t = Vec::with_capacity(n * pl);
        let mut pos_w = Vec::with_capacity(n * pl);
        let mut box_t = vec![0.0; n * 4 * pl];
        for (b, t) in targets.iter().enumerate() {
            let lt = &t.levels[li];
            labels.extend_from_slice(&lt.labels);
            ctr_t.extend(lt.centerness.iter().map(|&c| c as f64));
            pos_w.extend(lt.labels.iter().map(|&c| if c >= 0 { 1.0 } else { 0.0 }));
            for (i, o) in lt.boxes.iter().enumerate() {
                for s in 0..4 {
                    box_t[(b * 4 + s) * pl + i] = o[s] as f64;
                }
            }
        }
        let l = tape.sigmoid_focal_loss(lo.cls, &labels, cfg.focal_alpha, cfg.focal_gamma, pos_norm)?;
        cls = add(tape, cls, l)?;
        let l = tape.bce_with_logits(lo.ctr, &ctr_t, Some(&pos_w), pos_norm)?;
        ctr = add(tape, ctr, l)?;
        let l = tape.iou_loss(lo.reg, &box_t, &ctr_t, ctr_norm)?;
        bbox = add(tape, bbox, l)?;
    }
    let (cls, ctr, bbox) = (
        cls.ok_or_else(|| Error::Invalid("no pyramid levels".into()))?,
        ctr.expect("set with cls"),
        bbox.expect("set with cls"),
    );

    // Mask-branch RoIs and the ground truth each one inherits.
    let mut rois = Vec::new();
    let mut owners: Vec<&GroundTruth> = Vec::new();
    for (b, g) in gts.iter().enumerate() {
        let mut picked = 0;
        for gt in g.iter().take(cfg.max_mask_rois) {
            let seed = gt_roi(gt);
            if let Some(r) = crate::mask::Roi::from_detection(&seed, b, h, w, &mcfg.assign)? {
                rois.push(r);
                owners.push(gt);
                picked += 1;
            }
        }
        if cfg.rois_from_detections && picked < cfg.max_mask_rois && !g.is_empty() {
            let dets = model.decode(tape, &out.levels, b, (h, w), model.config().head.max_detections_train)?;
            for det in dets {
                if picked >= cfg.max_mask_rois {
                    break;
                }
                let (best, q) = g
                    .iter()
                    .enumerate()
                    .map(|(j, gt)| (j, iou(&det.bbox, &gt.bbox)))
                    .fold((0, f32::MIN), |a, c| if c.1 > a.1 { c } else { a });
                if q < cfg.roi_match_iou {
                    continue;
                }
                let mut det = det;
                det.label = g[best].label;
                if let Some(r) = crate::mask::Roi::from_detection(&det, b, h, w, &mcfg.assign)? {
                    rois.push(r);
                    owners.push(&g[best]);
                    picked += 1;
                }
            }
        }
    }

    let m = mcfg.mask_resolution();
    let (mask, maskiou, maskiou_targets, maskiou_input) = if rois.is_empty() {
        let zero = tape.constant(Tensor::scalar(T::zero()));
        (zero, None, Vec::new(), None)
    } else {
        if let Some(f) = frozen {
            if f.targets.len() != rois.len() || f.input.shape() != [rois.len(), 1, m, m] {
                return Err(Error::Invalid(format!(
                    "frozen mask-IoU state has {} targets and shape {:?} for {} RoIs",
                    f.targets.len(),
                    f.input.shape(),
                    rois.len()
                )));
            }
        }
        let mo = model
            .mask_branch()
            .forward_with(tape, p, &out.pyramid, &rois, frozen.map(|f| f.input.cast()))?;
        let labels: Vec<usize> = rois.iter().map(|r| r.source.label).collect();
        let chosen = tape.gather_channel(mo.logits, &labels)?;
        let mut mask_t = Vec::with_capacity(rois.len() * m * m);
        let mut measured = Vec::with_capacity(rois.len());
        let probs = tape.value(chosen).data();
        let input = Tensor::new(
            vec![rois.len(), 1, m, m],
            probs.iter().map(|&z| sigmoid(z.as_f64())).collect(),
        )?;
        for (r, (roi, gt)) in rois.iter().zip(&owners).enumerate() {
            let t = mask_target(&roi.bbox, &gt.mask, m);
            let pred: Vec<f32> = probs[r * m * m..(r + 1) * m * m]
                .iter()
                .map(|&z| sigmoid(z.as_f64()) as f32)
                .collect();
            measured.push(grid_iou(&pred, &t) as f64);
            mask_t.extend(t.into_iter().map(|v| v as f64));
        }
        let mask = tape.bce_with_logits(chosen, &mask_t, None, (rois.len() * m * m) as f64)?;
        let maskiou = match mo.iou {
            None => None,
            Some(raw) => {
                let own = tape.gather_channel(raw, &labels)?;
                let tgt = frozen.map_or_else(|| measured.clone(), |f| f.targets.clone());
                Some(tape.mse_loss(own, &tgt)?)
            }
        };
        (mask, maskiou, measured, Some(input))
    };

    let mut terms = vec![("cls", cls), ("centerness", ctr), ("box", bbox), ("mask", mask)];
    if let (Some(v), true) = (maskiou, cfg.maskiou_in_total) {
        terms.push(("maskiou", v));
    }
    let total = total_loss(tape, &terms)?;
    Ok(LossParts {
        cls,
        ctr,
        bbox,
        mask,
        maskiou,
        total,
        maskiou_targets,
        maskiou_input,
        rois: rois.len(),
    })
}
