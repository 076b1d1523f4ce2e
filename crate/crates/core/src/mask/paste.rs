use crate::boxes::{BBox, BinaryMask};
use crate::error::{Error, Result};
use crate::fcos::Detection;
use crate::tensor::kernels::sigmoid;
use crate::tensor::{bilinear_taps, Tensor};

/// One finished instance: detection, mask logits, IoU estimates, and the
/// full-image mask.
#[derive(Clone, Debug)]
pub struct InstanceResult {
    pub detection: Detection,
    /// K×M×M logits.
    pub mask_logits: Tensor<f32>,
    /// Per-class IoU estimates clamped to [0, 1]; empty without mask scoring.
    pub mask_iou: Vec<f32>,
    pub score: f32,
    pub mask: BinaryMask,
}

impl InstanceResult {
    /// Restricts an instance found on a padded canvas to the top-left `h`×`w`
    /// region; `None` when its box falls entirely outside.
    pub fn crop(&self, h: usize, w: usize) -> Option<InstanceResult> {
        let [x1, y1, x2, y2] = self.detection.bbox;
        let (hf, wf) = (h as f32, w as f32);
        let bbox = [x1.min(wf), y1.min(hf), x2.min(wf), y2.min(hf)];
        if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
            return None;
        }
        let mut mask = BinaryMask::zeros(h, w);
        for y in 0..h.min(self.mask.height) {
            for x in 0..w.min(self.mask.width) {
                mask.set(y, x, self.mask.get(y, x));
            }
        }
        let mut out = self.clone();
        out.detection.bbox = bbox;
        out.mask = mask;
        Some(out)
    }
}

pub fn recalibrate_score(cls_score: f32, mask_iou: f32) -> Result<f32> {
    let ok = |v: f32| (0.0..=1.0).contains(&v);
    if !ok(cls_score) || !ok(mask_iou) {
        return Err(Error::Invalid(format!(
            "recalibrate_score: inputs ({cls_score}, {mask_iou}) must lie in [0, 1]"
        )));
    }
    Ok(cls_score * mask_iou)
}

/// Resizes the sigmoid of an M×M logit grid onto `bbox` and thresholds it.
/// A pixel belongs to the box when its center lies inside `[x1, x2) × [y1, y2)`.
pub fn paste_mask(
    logits: &[f32],
    m: usize,
    bbox: &BBox,
    height: usize,
    width: usize,
    threshold: f32,
) -> Result<BinaryMask> {
    if logits.len() != m * m || m == 0 {
        return Err(Error::Invalid(format!(
            "paste_mask: {} logits for a {m}x{m} grid",
            logits.len()
        )));
    }
    let mut out = BinaryMask::zeros(height, width);
    let [x1, y1, x2, y2] = *bbox;
    let (bw, bh) = (x2 - x1, y2 - y1);
    if bw <= 0.0 || bh <= 0.0 {
        return Ok(out);
    }
    let probs: Vec<f32> = logits.iter().map(|&z| sigmoid(z)).collect();
    let xs = (x1 - 0.5).ceil().max(0.0) as usize..((x2 - 0.5).ceil().max(0.0) as usize).min(width);
    let ys = (y1 - 0.5).ceil().max(0.0) as usize..((y2 - 0.5).ceil().max(0.0) as usize).min(height);
    for y in ys {
        let v = ((y as f32 + 0.5 - y1) / bh * m as f32 - 0.5) as f64;
        for x in xs.clone() {
            let u = ((x as f32 + 0.5 - x1) / bw * m as f32 - 0.5) as f64;
            let p: f64 = bilinear_taps(m, m, u, v)
                .iter()
                .map(|&(i, wt)| probs[i] as f64 * wt)
                .sum();
            out.set(y, x, p >= threshold as f64);
        }
    }
    Ok(out)
}
