use super::head::{location_grid, HeadConfig};
use super::nms::nms;
use crate::boxes::{clip, BBox};
use crate::error::{shape_err, Result};
use crate::tensor::kernels::sigmoid;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub label: usize,
    pub score: f32,
    pub level: u32,
    pub centerness: f32,
}

/// Head output values of one level, as produced on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LevelMaps<'a> {
    pub level: u32,
    pub cls: &'a Tensor<f32>,
    pub ctr: &'a Tensor<f32>,
    pub reg: &'a Tensor<f32>,
}

/// Turns per-location predictions of image `batch` into scored boxes,
/// drops low scores, and suppresses duplicates down to `budget`.
pub fn decode_detections(
    levels: &[LevelMaps<'_>],
    batch: usize,
    image_h: usize,
    image_w: usize,
    cfg: &HeadConfig,
    budget: usize,
) -> Result<Vec<Detection>> {
    let mut candidates = Vec::new();
    for lm in levels {
        let [n, k, h, w] = lm.cls.dims4()?;
        if lm.ctr.shape() != [n, 1, h, w] || lm.reg.shape() != [n, 4, h, w] || batch >= n {
            return Err(shape_err(
                "decode_detections",
                format!("level P{} maps disagree", lm.level),
            ));
        }
        let grid = location_grid(lm.level, h, w, cfg.location_offset);
        let p = h * w;
        let mut level_cands = Vec::new();
        for (i, &(x, y)) in grid.iter().enumerate() {
            let ctr = sigmoid(lm.ctr.data()[batch * p + i]);
            for c in 0..k {
                let cls = sigmoid(lm.cls.data()[(batch * k + c) * p + i]);
                let rank = if cfg.centerness_before_nms {
                    if cfg.sqrt_score {
                        (cls * ctr).sqrt()
                    } else {
                        cls * ctr
                    }
                } else {
                    cls
                };
                if rank < cfg.score_threshold {
                    continue;
                }
                let off = |s: usize| lm.reg.data()[(batch * 4 + s) * p + i];
                let bbox = [x - off(0), y - off(1), x + off(2), y + off(3)];
                level_cands.push(Detection {
                    bbox: clip(&bbox, image_w as f32, image_h as f32),
                    label: c,
                    score: rank,
                    level: lm.level,
                    centerness: ctr,
                });
            }
        }
        if level_cands.len() > cfg.pre_nms_top_n {
            level_cands.sort_by(|a, b| b.score.total_cmp(&a.score));
            level_cands.truncate(cfg.pre_nms_top_n);
        }
        candidates.extend(level_cands);
    }
    let mut kept = nms(&candidates, cfg.nms_iou, budget);
    if !cfg.centerness_before_nms {
        for d in &mut kept {
            d.score = if cfg.sqrt_score {
                (d.score * d.centerness).sqrt()
            } else {
                d.score * d.centerness
            };
        }
        kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    Ok(kept)
}
