//! Flat text configuration: one `section.key = value` per line, `#` starts a
//! comment. `model.preset` (lite or base) selects the defaults that the
//! remaining lines override.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{Attention, Variant};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{default_milestones, TrainConfig};

/// Held-out scenes used by evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub first_seed: u64,
    pub count: usize,
    pub image_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            first_seed: 1_000_000,
            count: 100,
            image_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub lite: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

pub const CLASSES: usize = 3;

impl Config {
    pub fn preset(lite: bool) -> Self {
        Config {
            lite,
            model: if lite {
                ModelConfig::lite(CLASSES)
            } else {
                ModelConfig::base(CLASSES)
            },
            train: TrainConfig::new(2000),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// `(key, value, description)` for every setting, in file order.
    fn entries(&self) -> Vec<(&'static str, String, &'static str)> {
        let m = &self.model;
        let b = &m.backbone;
        let s0 = &b.stages[0];
        let h = &m.head;
        let k = &m.mask;
        let t = &self.train;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let conv_w: Vec<usize> = b.stages.iter().map(|s| s.conv_channels).collect();
        let out_w: Vec<usize> = b.stages.iter().map(|s| s.out_channels).collect();
        let mods: Vec<usize> = b.stages.iter().map(|s| s.module_count).collect();
        let ranges: Vec<String> = t
            .loss
            .ranges
            .iter()
            .take(t.loss.ranges.len().saturating_sub(1))
            .map(|r| r.1.to_string())
            .collect();
        vec![
            (
                "model.preset",
                if self.lite { "lite" } else { "base" }.into(),
                "defaults the other keys override: lite or base",
            ),
            ("model.classes", m.classes.to_string(), "object classes"),
            (
                "backbone.variant",
                b.variant.to_string(),
                "V2-19, V2-39, V2-57 or V2-99; resets modules and conv_count",
            ),
            ("backbone.stem", list(&b.stem), "stem convolution widths"),
            (
                "backbone.conv_channels",
                list(&conv_w),
                "OSA convolution width per stage",
            ),
            ("backbone.out_channels", list(&out_w), "OSA output width per stage"),
            ("backbone.modules", list(&mods), "OSA modules per stage"),
            (
                "backbone.conv_count",
                s0.conv_count.to_string(),
                "convolutions per OSA module",
            ),
            (
                "backbone.residual",
                s0.residual.to_string(),
                "identity shortcut when widths match",
            ),
            ("backbone.attention", s0.attention.to_string(), "none, se or ese"),
            (
                "backbone.se_reduction",
                s0.se_reduction.to_string(),
                "SE bottleneck ratio",
            ),
            ("backbone.kernel", s0.kernel.to_string(), "OSA convolution size"),
            ("backbone.fpn_channels", b.fpn_channels.to_string(), "pyramid width"),
            (
                "head.tower_depth",
                h.tower_depth.to_string(),
                "3x3 convolutions per tower",
            ),
            ("head.tower_channels", h.tower_channels.to_string(), "tower width"),
            (
                "head.score_threshold",
                h.score_threshold.to_string(),
                "minimum combined score kept",
            ),
            ("head.nms_iou", h.nms_iou.to_string(), "suppression overlap"),
            (
                "head.max_detections_train",
                h.max_detections_train.to_string(),
                "boxes kept while training",
            ),
            (
                "head.max_detections_infer",
                h.max_detections_infer.to_string(),
                "boxes kept at inference",
            ),
            (
                "head.pre_nms_top_n",
                h.pre_nms_top_n.to_string(),
                "candidates per level before suppression",
            ),
            (
                "head.sqrt_score",
                h.sqrt_score.to_string(),
                "geometric mean instead of product",
            ),
            (
                "head.centerness_before_nms",
                h.centerness_before_nms.to_string(),
                "apply centerness before ranking",
            ),
            (
                "head.location_offset",
                h.location_offset.to_string(),
                "cell sample point as a fraction of the stride",
            ),
            (
                "head.prior_prob",
                h.prior_prob.to_string(),
                "initial foreground probability",
            ),
            ("mask.conv_count", k.conv_count.to_string(), "mask head convolutions"),
            ("mask.channels", k.channels.to_string(), "mask head width"),
            ("mask.roi_resolution", k.roi_resolution.to_string(), "pooled RoI side"),
            ("mask.sampling", k.sampling.to_string(), "bilinear samples per bin side"),
            ("mask.threshold", k.mask_threshold.to_string(), "pasting threshold"),
            (
                "mask.scoring",
                k.mask_scoring.to_string(),
                "predict mask IoU and rescale scores",
            ),
            (
                "mask.iou_convs",
                k.maskiou_convs.to_string(),
                "mask-IoU head convolutions",
            ),
            ("mask.iou_fc", k.maskiou_fc.to_string(), "mask-IoU head hidden width"),
            (
                "mask.assign",
                if k.assign.adaptive { "adaptive" } else { "canonical" }.into(),
                "RoI level rule: adaptive or canonical",
            ),
            ("mask.k0", k.assign.k0.to_string(), "canonical rule base level"),
            (
                "mask.canonical",
                k.assign.canonical.to_string(),
                "canonical rule reference size",
            ),
            ("mask.k_min", k.assign.k_min.to_string(), "lowest RoI level"),
            ("mask.k_max", k.assign.k_max.to_string(), "highest RoI level"),
            (
                "loss.focal_alpha",
                t.loss.focal_alpha.map_or("none".into(), |a| a.to_string()),
                "focal balance weight or none",
            ),
            ("loss.focal_gamma", t.loss.focal_gamma.to_string(), "focal exponent"),
            (
                "loss.ranges",
                ranges.join(","),
                "level boundaries on the largest box offset",
            ),
            (
                "loss.max_mask_rois",
                t.loss.max_mask_rois.to_string(),
                "mask RoIs per image",
            ),
            (
                "loss.roi_match_iou",
                t.loss.roi_match_iou.to_string(),
                "box IoU for a detection to inherit a mask",
            ),
            (
                "loss.rois_from_detections",
                t.loss.rois_from_detections.to_string(),
                "add matched detections to the mask RoIs",
            ),
            (
                "loss.maskiou_in_total",
                t.loss.maskiou_in_total.to_string(),
                "include the mask-IoU term",
            ),
            (
                "train.iterations",
                t.iterations.to_string(),
                "update steps; also resets milestones",
            ),
            ("train.batch", t.batch.to_string(), "images per step"),
            ("train.seed", t.seed.to_string(), "initialization and data seed"),
            ("train.image_size", t.image_size.to_string(), "square scene side"),
            (
                "train.max_instances",
                t.max_instances.to_string(),
                "objects per scene, at most",
            ),
            (
                "train.pool",
                t.pool.to_string(),
                "fixed scene count, 0 for a fresh stream",
            ),
            (
                "train.checkpoint_every",
                t.checkpoint_every.to_string(),
                "iterations between checkpoints, 0 for none",
            ),
            ("train.lr", t.sgd.lr.to_string(), "base learning rate"),
            ("train.momentum", t.sgd.momentum.to_string(), "SGD momentum"),
            ("train.weight_decay", t.sgd.weight_decay.to_string(), "L2 penalty"),
            (
                "train.milestones",
                list(&t.sgd.milestones),
                "iterations where the rate drops",
            ),
            ("train.gamma", t.sgd.gamma.to_string(), "rate factor at each milestone"),
            (
                "train.warmup_iters",
                t.sgd.warmup_iters.to_string(),
                "linear warmup length",
            ),
            (
                "train.warmup_factor",
                t.sgd.warmup_factor.to_string(),
                "starting fraction of the rate",
            ),
            (
                "train.clip_norm",
                t.sgd.clip_norm.to_string(),
                "gradient norm cap, 0 for none",
            ),
            (
                "eval.first_seed",
                self.eval.first_seed.to_string(),
                "first held-out scene",
            ),
            ("eval.count", self.eval.count.to_string(), "held-out scenes"),
            (
                "eval.image_size",
                self.eval.image_size.to_string(),
                "held-out scene side",
            ),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v, _)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Every key with its value and description, as a commented config file.
    pub fn reference(lite: bool) -> String {
        let mut out = String::from("# All settings with their defaults.\n");
        let mut section = "";
        for (k, v, doc) in Config::preset(lite).entries() {
            let sec = k.split('.').next().unwrap_or("");
            if sec != section {
                out.push_str(&format!("\n# [{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("# {doc}\n{k} = {v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            lines.push((i + 1, k.trim(), v.trim()));
        }
        let mut seen = HashSet::new();
        for &(n, k, _) in &lines {
            if !seen.insert(k) {
                return Err(Error::Config {
                    line: n,
                    msg: format!("duplicate key {k}"),
                });
            }
        }
        let lite = match lines.iter().find(|l| l.1 == "model.preset") {
            None => true,
            Some(&(_, _, "lite")) => true,
            Some(&(_, _, "base")) => false,
            Some(&(n, _, v)) => {
                return Err(Error::Config {
                    line: n,
                    msg: format!("preset must be lite or base, got {v:?}"),
                })
            }
        };
        let mut cfg = Config::preset(lite);
        let mut milestones_set = false;
        for &(n, k, v) in &lines {
            milestones_set |= k == "train.milestones";
            cfg.set(k, v).map_err(|msg| Error::Config { line: n, msg })?;
        }
        if !milestones_set {
            cfg.train.sgd.milestones = default_milestones(cfg.train.iterations);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Config::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.preset" => {}
            "model.classes" => {
                let c = num(v)?;
                m.classes = c;
                m.head.classes = c;
                m.mask.classes = c;
            }
            "backbone.variant" => {
                let variant: Variant = v.parse().map_err(|e: Error| e.to_string())?;
                let (mods, convs) = variant.layout();
                m.backbone.variant = variant;
                for (s, &n) in m.backbone.stages.iter_mut().zip(&mods) {
                    s.module_count = n;
                    s.conv_count = convs;
                }
            }
            "backbone.stem" => m.backbone.stem = array(v)?,
            "backbone.conv_channels" => {
                let a: [usize; 4] = array(v)?;
                m.backbone
                    .stages
                    .iter_mut()
                    .zip(a)
                    .for_each(|(s, x)| s.conv_channels = x);
            }
            "backbone.out_channels" => {
                let a: [usize; 4] = array(v)?;
                m.backbone
                    .stages
                    .iter_mut()
                    .zip(a)
                    .for_each(|(s, x)| s.out_channels = x);
            }
            "backbone.modules" => {
                let a: [usize; 4] = array(v)?;
                m.backbone
                    .stages
                    .iter_mut()
                    .zip(a)
                    .for_each(|(s, x)| s.module_count = x);
            }
            "backbone.conv_count" => {
                let x = num(v)?;
                m.backbone.stages.iter_mut().for_each(|s| s.conv_count = x);
            }
            "backbone.residual" => {
                let x = num(v)?;
                m.backbone.stages.iter_mut().for_each(|s| s.residual = x);
            }
            "backbone.attention" => {
                let x: Attention = v.parse().map_err(|e: Error| e.to_string())?;
                m.backbone.stages.iter_mut().for_each(|s| s.attention = x);
            }
            "backbone.se_reduction" => {
                let x = num(v)?;
                m.backbone.stages.iter_mut().for_each(|s| s.se_reduction = x);
            }
            "backbone.kernel" => {
                let x = num(v)?;
                m.backbone.stages.iter_mut().for_each(|s| s.kernel = x);
            }
            "backbone.fpn_channels" => m.backbone.fpn_channels = num(v)?,
            "head.tower_depth" => m.head.tower_depth = num(v)?,
            "head.tower_channels" => m.head.tower_channels = num(v)?,
            "head.score_threshold" => m.head.score_threshold = num(v)?,
            "head.nms_iou" => m.head.nms_iou = num(v)?,
            "head.max_detections_train" => m.head.max_detections_train = num(v)?,
            "head.max_detections_infer" => m.head.max_detections_infer = num(v)?,
            "head.pre_nms_top_n" => m.head.pre_nms_top_n = num(v)?,
            "head.sqrt_score" => m.head.sqrt_score = num(v)?,
            "head.centerness_before_nms" => m.head.centerness_before_nms = num(v)?,
            "head.location_offset" => m.head.location_offset = num(v)?,
            "head.prior_prob" => m.head.prior_prob = num(v)?,
            "mask.conv_count" => m.mask.conv_count = num(v)?,
            "mask.channels" => m.mask.channels = num(v)?,
            "mask.roi_resolution" => m.mask.roi_resolution = num(v)?,
            "mask.sampling" => m.mask.sampling = num(v)?,
            "mask.threshold" => m.mask.mask_threshold = num(v)?,
            "mask.scoring" => m.mask.mask_scoring = num(v)?,
            "mask.iou_convs" => m.mask.maskiou_convs = num(v)?,
            "mask.iou_fc" => m.mask.maskiou_fc = num(v)?,
            "mask.assign" => {
                m.mask.assign.adaptive = match v {
                    "adaptive" => true,
                    "canonical" => false,
                    _ => return Err(format!("assign must be adaptive or canonical, got {v:?}")),
                }
            }
            "mask.k0" => m.mask.assign.k0 = num(v)?,
            "mask.canonical" => m.mask.assign.canonical = num(v)?,
            "mask.k_min" => m.mask.assign.k_min = num(v)?,
            "mask.k_max" => m.mask.assign.k_max = num(v)?,
            "loss.focal_alpha" => t.loss.focal_alpha = if v == "none" { None } else { Some(num(v)?) },
            "loss.focal_gamma" => t.loss.focal_gamma = num(v)?,
            "loss.ranges" => {
                let bounds: Vec<f32> = items(v)?;
                let mut lo = f32::NEG_INFINITY;
                let mut ranges = Vec::with_capacity(bounds.len() + 1);
                for b in bounds {
                    if b <= lo {
                        return Err("range boundaries must increase".into());
                    }
                    ranges.push((lo, b));
                    lo = b;
                }
                ranges.push((lo, f32::INFINITY));
                t.loss.ranges = ranges;
            }
            "loss.max_mask_rois" => t.loss.max_mask_rois = num(v)?,
            "loss.roi_match_iou" => t.loss.roi_match_iou = num(v)?,
            "loss.rois_from_detections" => t.loss.rois_from_detections = num(v)?,
            "loss.maskiou_in_total" => t.loss.maskiou_in_total = num(v)?,
            "train.iterations" => t.iterations = num(v)?,
            "train.batch" => t.batch = num(v)?,
            "train.seed" => t.seed = num(v)?,
            "train.image_size" => t.image_size = num(v)?,
            "train.max_instances" => t.max_instances = num(v)?,
            "train.pool" => t.pool = num(v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(v)?,
            "train.lr" => t.sgd.lr = num(v)?,
            "train.momentum" => t.sgd.momentum = num(v)?,
            "train.weight_decay" => t.sgd.weight_decay = num(v)?,
            "train.milestones" => t.sgd.milestones = items(v)?,
            "train.gamma" => t.sgd.gamma = num(v)?,
            "train.warmup_iters" => t.sgd.warmup_iters = num(v)?,
            "train.warmup_factor" => t.sgd.warmup_factor = num(v)?,
            "train.clip_norm" => t.sgd.clip_norm = num(v)?,
            "eval.first_seed" => self.eval.first_seed = num(v)?,
            "eval.count" => self.eval.count = num(v)?,
            "eval.image_size" => self.eval.image_size = num(v)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn items<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(s.trim())).collect()
}

fn array<T: FromStr, const N: usize>(v: &str) -> std::result::Result<[T; N], String> {
    let xs: Vec<T> = items(v)?;
    xs.try_into()
        .map_err(|xs: Vec<T>| format!("expected {N} values, got {}", xs.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for lite in [true, false] {
            let c = Config::preset(lite);
            assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn reference_parses_to_defaults() {
        assert_eq!(Config::parse(&Config::reference(true)).unwrap(), Config::preset(true));
    }

    #[test]
    fn errors_name_the_line() {
        match Config::parse("train.batch = 2\nbogus.key = 1\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Config::parse("train.batch = 2\ntrain.batch = 3\n").is_err());
    }

    #[test]
    fn iterations_rescale_milestones() {
        let c = Config::parse("train.iterations = 900\n").unwrap();
        assert_eq!(c.train.sgd.milestones, vec![600, 800]);
    }
}
