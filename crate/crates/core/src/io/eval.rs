//! Average precision for boxes and masks over a range of IoU thresholds.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use super::config::EvalConfig;
use super::records::{rle_decode, Dataset, ResultRecord};
use crate::boxes::{iou, BinaryMask};
use crate::data::{generate_sample, SceneSample};
use crate::error::{Error, Result};
use crate::model::CenterMask;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f32> {
    (0..10).map(|i| 0.5 + 0.05 * i as f32).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApTable {
    pub thresholds: Vec<f32>,
    pub classes: Vec<usize>,
    /// `per_class[c][t]`; `None` for classes without ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
}

impl ApTable {
    /// Mean over classes with ground truth at threshold index `t`.
    pub fn at(&self, t: usize) -> f64 {
        let vals: Vec<f64> = self.per_class.iter().filter_map(|row| row[t]).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Mean over thresholds and classes.
    pub fn mean(&self) -> f64 {
        let n = self.thresholds.len();
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|t| self.at(t)).sum::<f64>() / n as f64
    }

    /// Value at the threshold closest to `thr`.
    pub fn at_threshold(&self, thr: f32) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - thr).abs() < 1e-4)
            .map(|t| self.at(t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub boxes: ApTable,
    pub masks: ApTable,
}

/// Area under the precision envelope for detections already sorted by
/// descending score, `tp[i]` marking true positives.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    ap
}

enum Geometry<'a> {
    Boxes,
    Masks(&'a [BinaryMask], &'a [BinaryMask]),
}

fn table(results: &[ResultRecord], gt: &Dataset, classes: &[usize], thresholds: &[f32], geom: Geometry<'_>) -> ApTable {
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[b].score.total_cmp(&results[a].score));
    let overlap = |d: usize, g: usize| -> f32 {
        match &geom {
            Geometry::Boxes => iou(&results[d].bbox, &gt.annotations[g].bbox),
            Geometry::Masks(pm, gm) => pm[d].iou(&gm[g]),
        }
    };
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in classes {
        let gts: Vec<usize> = (0..gt.annotations.len())
            .filter(|&g| gt.annotations[g].label == c)
            .collect();
        let dets: Vec<usize> = order.iter().copied().filter(|&d| results[d].label == c).collect();
        let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
        for &g in &gts {
            by_image.entry(gt.annotations[g].image_id).or_default().push(g);
        }
        let row = thresholds
            .iter()
            .map(|&thr| {
                if gts.is_empty() {
                    return None;
                }
                let mut used: BTreeSet<usize> = BTreeSet::new();
                let tp: Vec<bool> = dets
                    .iter()
                    .map(|&d| {
                        let cands = by_image.get(&results[d].image_id).map(Vec::as_slice).unwrap_or(&[]);
                        let best = cands
                            .iter()
                            .filter(|g| !used.contains(g))
                            .map(|&g| (g, overlap(d, g)))
                            .filter(|&(_, q)| q >= thr)
                            .fold(None, |acc: Option<(usize, f32)>, c| match acc {
                                Some(a) if a.1 >= c.1 => Some(a),
                                _ => Some(c),
                            });
                        match best {
                            Some((g, _)) => {
                                used.insert(g);
                                true
                            }
                            None => false,
                        }
                    })
                    .collect();
                Some(average_precision(&tp, gts.len()))
            })
            .collect();
        per_class.push(row);
    }
    ApTable {
        thresholds: thresholds.to_vec(),
        classes: classes.to_vec(),
        per_class,
    }
}

/// Greedy matching by descending score; each ground truth is claimed by at
/// most one prediction, the one with the highest overlap among those free.
pub fn evaluate_ap(results: &[ResultRecord], gt: &Dataset, thresholds: &[f32]) -> Result<EvalReport> {
    let ids: BTreeSet<u64> = gt.images.iter().map(|i| i.id).collect();
    if let Some(r) = results.iter().find(|r| !ids.contains(&r.image_id)) {
        return Err(Error::Eval(format!("result for unknown image id {}", r.image_id)));
    }
    if let Some(a) = gt.annotations.iter().find(|a| !ids.contains(&a.image_id)) {
        return Err(Error::Eval(format!(
            "annotation {} refers to unknown image {}",
            a.id, a.image_id
        )));
    }
    let mut classes: BTreeSet<usize> = gt.categories.iter().map(|c| c.id).collect();
    classes.extend(gt.annotations.iter().map(|a| a.label));
    let classes: Vec<usize> = classes.into_iter().collect();
    let pred_masks = results
        .iter()
        .map(|r| rle_decode(&r.mask))
        .collect::<Result<Vec<_>>>()?;
    let gt_masks = gt
        .annotations
        .iter()
        .map(|a| rle_decode(&a.mask))
        .collect::<Result<Vec<_>>>()?;
    let sizes: HashMap<u64, [usize; 2]> = gt.images.iter().map(|i| (i.id, [i.height, i.width])).collect();
    for (r, m) in results.iter().zip(&pred_masks) {
        if sizes[&r.image_id] != [m.height, m.width] {
            return Err(Error::Eval(format!("mask size differs from image {}", r.image_id)));
        }
    }
    Ok(EvalReport {
        boxes: table(results, gt, &classes, thresholds, Geometry::Boxes),
        masks: table(
            results,
            gt,
            &classes,
            thresholds,
            Geometry::Masks(&pred_masks, &gt_masks),
        ),
    })
}

/// Held-out scenes `first_seed..first_seed + count`.
pub fn held_out_scenes(cfg: &EvalConfig, max_instances: usize) -> Result<Vec<SceneSample>> {
    (0..cfg.count as u64)
        .map(|i| generate_sample(cfg.first_seed + i, cfg.image_size, cfg.image_size, max_instances))
        .collect()
}

/// Runs inference over `scenes` in small batches and returns the records.
pub fn predict_scenes(
    model: &CenterMask,
    params: &ParamStore<f32>,
    scenes: &[SceneSample],
) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for chunk in scenes.chunks(4) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        let results = model.infer(params, &Tensor::stack(&images)?)?;
        for (s, insts) in chunk.iter().zip(&results) {
            out.extend(insts.iter().map(|r| ResultRecord::from_instance(s.seed, r)));
        }
    }
    Ok(out)
}

/// Box and mask AP of `model` on the held-out scenes.
pub fn evaluate_model(
    model: &CenterMask,
    params: &ParamStore<f32>,
    cfg: &EvalConfig,
    max_instances: usize,
) -> Result<EvalReport> {
    let scenes = held_out_scenes(cfg, max_instances)?;
    let records = predict_scenes(model, params, &scenes)?;
    evaluate_ap(&records, &Dataset::from_samples(&scenes), &coco_thresholds())
}
