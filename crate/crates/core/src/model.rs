//! The assembled instance segmenter: backbone, pyramid, detection head and
//! mask branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, FeaturePyramid, Fpn, Variant, VoVNet};
use crate::error::{Error, Result};
use crate::fcos::{decode_detections, Detection, FcosHead, HeadConfig, LevelMaps, LevelOutput};
use crate::mask::{paste_mask, recalibrate_score, InstanceResult, MaskBranch, MaskConfig, Roi};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub mask: MaskConfig,
}

impl ModelConfig {
    pub fn new(variant: Variant, classes: usize, lite: bool) -> Self {
        ModelConfig {
            classes,
            backbone: BackboneConfig::new(variant, lite),
            head: HeadConfig::new(classes, lite),
            mask: MaskConfig::new(classes, lite),
        }
    }

    /// The reduced configuration: V2-19 backbone with narrow pyramid and heads.
    pub fn lite(classes: usize) -> Self {
        ModelConfig::new(Variant::V19, classes, true)
    }

    pub fn base(classes: usize) -> Self {
        ModelConfig::new(Variant::V39, classes, false)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        self.mask.validate()?;
        if self.head.classes != self.classes || self.mask.classes != self.classes {
            return Err(Error::Invalid("head and mask class counts must match the model".into()));
        }
        Ok(())
    }
}

/// Detection-side outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    pub pyramid: FeaturePyramid,
    pub levels: Vec<LevelOutput>,
}

#[derive(Clone, Debug)]
pub struct CenterMask {
    cfg: ModelConfig,
    backbone: VoVNet,
    fpn: Fpn,
    head: FcosHead,
    mask: MaskBranch,
}

impl CenterMask {
    /// Builds the architecture and its freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = VoVNet::new(&mut store, &cfg.backbone, &mut rng)?;
        let [_, c3, c4, c5] = cfg.backbone.stage_channels();
        let fpn = Fpn::new(&mut store, [c3, c4, c5], cfg.backbone.fpn_channels, &mut rng)?;
        let head = FcosHead::new(&mut store, cfg.backbone.fpn_channels, &cfg.head, &mut rng)?;
        let mask = MaskBranch::new(&mut store, cfg.backbone.fpn_channels, &cfg.mask, &mut rng)?;
        Ok((
            CenterMask {
                cfg: cfg.clone(),
                backbone,
                fpn,
                head,
                mask,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &VoVNet {
        &self.backbone
    }

    pub fn mask_branch(&self) -> &MaskBranch {
        &self.mask
    }

    pub fn backbone_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<[Var; 4]> {
        self.backbone.forward(tape, p, images)
    }

    pub fn fpn_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, cs: [Var; 4]) -> Result<FeaturePyramid> {
        self.fpn.forward(tape, p, [cs[1], cs[2], cs[3]])
    }

    pub fn head_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pyramid: &FeaturePyramid,
    ) -> Result<Vec<LevelOutput>> {
        self.head.forward(tape, p, pyramid)
    }

    pub fn detect<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<DetectorOutput> {
        let cs = self.backbone_forward(tape, p, images)?;
        let pyramid = self.fpn_forward(tape, p, cs)?;
        let levels = self.head_forward(tape, p, &pyramid)?;
        Ok(DetectorOutput { pyramid, levels })
    }

    /// Scored, suppressed boxes of image `batch` read off the tape.
    pub fn decode<T: Scalar>(
        &self,
        tape: &Tape<T>,
        levels: &[LevelOutput],
        batch: usize,
        image_hw: (usize, usize),
        budget: usize,
    ) -> Result<Vec<Detection>> {
        let owned: Vec<[Tensor<f32>; 3]> = levels
            .iter()
            .map(|lo| [lo.cls, lo.ctr, lo.reg].map(|v| tape.value(v).cast()))
            .collect();
        let maps: Vec<LevelMaps<'_>> = levels
            .iter()
            .zip(&owned)
            .map(|(lo, [cls, ctr, reg])| LevelMaps {
                level: lo.level,
                cls,
                ctr,
                reg,
            })
            .collect();
        decode_detections(&maps, batch, image_hw.0, image_hw.1, &self.cfg.head, budget)
    }

    /// Full inference on an N×3×H×W batch: at most the inference budget of
    /// instances per image, sorted by recalibrated score.
    /// Segments one interleaved RGB image of any size. The image is padded
    /// to the stride and the results cropped back to it.
    pub fn infer_rgb(&self, params: &ParamStore<f32>, rgb: &[u8], h: usize, w: usize) -> Result<Vec<InstanceResult>> {
        let (padded, ph, pw) = crate::io::pad_rgb(rgb, h, w)?;
        let x = crate::data::standardize(&padded, ph, pw)?.reshape(vec![1, 3, ph, pw])?;
        let found = self.infer(params, &x)?.remove(0);
        Ok(found.iter().filter_map(|r| r.crop(h, w)).collect())
    }

    pub fn infer(&self, params: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Vec<Vec<InstanceResult>>> {
        let [n, _, h, w] = images.dims4()?;
        let mut tape = Tape::<f32>::new();
        let p = params.bind(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.detect(&mut tape, &p, x)?;
        let mut rois = Vec::new();
        for b in 0..n {
            for det in self.decode(&tape, &out.levels, b, (h, w), self.cfg.head.max_detections_infer)? {
                if let Some(r) = Roi::from_detection(&det, b, h, w, &self.cfg.mask.assign)? {
                    rois.push(r);
                }
            }
        }
        let mut results: Vec<Vec<InstanceResult>> = vec![Vec::new(); n];
        if rois.is_empty() {
            return Ok(results);
        }
        let mo = self.mask.forward(&mut tape, &p, &out.pyramid, &rois)?;
        let k = self.cfg.classes;
        let m = self.cfg.mask.mask_resolution();
        let logits = tape.value(mo.logits).data();
        let ious = mo.iou.map(|v| tape.value(v).data());
        for (r, roi) in rois.iter().enumerate() {
            let det = &roi.source;
            let all = &logits[r * k * m * m..(r + 1) * k * m * m];
            let own = &all[det.label * m * m..(det.label + 1) * m * m];
            let mask = paste_mask(own, m, &det.bbox, h, w, self.cfg.mask.mask_threshold)?;
            let mask_iou: Vec<f32> = ious
                .map(|d| d[r * k..(r + 1) * k].iter().map(|v| v.clamp(0.0, 1.0)).collect())
                .unwrap_or_default();
            let score = match mask_iou.get(det.label) {
                Some(&q) => recalibrate_score(det.score.clamp(0.0, 1.0), q)?,
                None => det.score,
            };
            results[roi.batch].push(InstanceResult {
                detection: det.clone(),
                mask_logits: Tensor::new(vec![k, m, m], all.to_vec())?,
                mask_iou,
                score,
                mask,
            });
        }
        for list in &mut results {
            list.sort_by(|a, b| b.score.total_cmp(&a.score));
        }
        Ok(results)
    }
}
