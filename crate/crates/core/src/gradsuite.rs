//! Finite-difference checks for every differentiable operation and for the
//! assembled training loss of a narrow model.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{ese_forward, se_forward, Variant};
use crate::data::generate_sample;
use crate::error::Result;
use crate::mask::sam_forward;
use crate::model::{CenterMask, ModelConfig};
use crate::params::Bound;
use crate::tensor::{check_gradients, GradCheckOptions, Objective, ReduceMode, RoiSample, Scalar, Tape, Tensor, Var};
use crate::train::{training_loss, FrozenMaskIou, GroundTruth, LossConfig};

pub const UNIT_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    /// Entries probed across all parameter tensors.
    pub checked: usize,
    pub seconds: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitOp {
    Conv,
    ConvStrided,
    Deconv,
    ReduceMax,
    ReduceAvg,
    GlobalAvgPool,
    FullyConnected,
    Sigmoid,
    Relu,
    Exp,
    Scale,
    MulScalar,
    Concat,
    Add,
    ScaleChannels,
    ScaleSpatial,
    MaxPool,
    Upsample,
    RoiAlign,
    Reshape,
    Gather,
    Sum,
    FocalLoss,
    FocalLossUnweighted,
    Bce,
    IouLoss,
    Mse,
    Sam,
    Ese,
    Se,
}

pub const UNIT_OPS: [UnitOp; 30] = [
    UnitOp::Conv,
    UnitOp::ConvStrided,
    UnitOp::Deconv,
    UnitOp::ReduceMax,
    UnitOp::ReduceAvg,
    UnitOp::GlobalAvgPool,
    UnitOp::FullyConnected,
    UnitOp::Sigmoid,
    UnitOp::Relu,
    UnitOp::Exp,
    UnitOp::Scale,
    UnitOp::MulScalar,
    UnitOp::Concat,
    UnitOp::Add,
    UnitOp::ScaleChannels,
    UnitOp::ScaleSpatial,
    UnitOp::MaxPool,
    UnitOp::Upsample,
    UnitOp::RoiAlign,
    UnitOp::Reshape,
    UnitOp::Gather,
    UnitOp::Sum,
    UnitOp::FocalLoss,
    UnitOp::FocalLossUnweighted,
    UnitOp::Bce,
    UnitOp::IouLoss,
    UnitOp::Mse,
    UnitOp::Sam,
    UnitOp::Ese,
    UnitOp::Se,
];

/// Evenly spaced values in `[lo, hi]`, shuffled: all distinct and at least
/// `(hi − lo)/n` apart, which keeps max, relu and pooling away from ties.
fn spread<R: Rng>(rng: &mut R, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| lo + (hi - lo) * (i as f32 + 0.5) / n as f32).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches data")
}

const ROI_BOXES: [[f64; 4]; 2] = [[0.3, 0.7, 5.2, 6.1], [-0.4, 0.2, 2.9, 3.3]];

impl UnitOp {
    pub fn name(self) -> String {
        format!("{self:?}").to_lowercase()
    }

    fn params<R: Rng>(self, rng: &mut R) -> Vec<Tensor<f32>> {
        let mut s = |shape: &[usize], lo: f32, hi: f32| spread(rng, shape, lo, hi);
        use UnitOp::*;
        match self {
            Conv | ConvStrided => vec![
                s(&[2, 3, 5, 5], -1.0, 1.0),
                s(&[4, 3, 3, 3], -0.5, 0.5),
                s(&[4], -0.1, 0.1),
            ],
            Deconv => vec![
                s(&[1, 3, 3, 3], -1.0, 1.0),
                s(&[3, 2, 2, 2], -0.5, 0.5),
                s(&[2], -0.1, 0.1),
            ],
            ReduceMax | ReduceAvg | Sigmoid | Relu | Exp | Scale | Sum => vec![s(&[2, 3, 4, 4], -1.0, 1.0)],
            GlobalAvgPool | Upsample => vec![s(&[2, 3, 3, 3], -1.0, 1.0)],
            FullyConnected => vec![s(&[3, 5], -1.0, 1.0), s(&[4, 5], -0.5, 0.5), s(&[4], -0.1, 0.1)],
            MulScalar => vec![s(&[2, 2, 3, 3], -1.0, 1.0), Tensor::scalar(-0.7)],
            Concat => vec![s(&[2, 2, 3, 3], -1.0, 1.0), s(&[2, 1, 3, 3], -1.0, 1.0)],
            Add => vec![s(&[2, 2, 3, 3], -1.0, 1.0), s(&[2, 2, 3, 3], -1.0, 1.0)],
            ScaleChannels => vec![s(&[2, 3, 4, 4], -1.0, 1.0), s(&[2, 3], 0.1, 0.9)],
            ScaleSpatial => vec![s(&[2, 3, 4, 4], -1.0, 1.0), s(&[2, 1, 4, 4], 0.1, 0.9)],
            MaxPool => vec![s(&[1, 2, 7, 7], -1.0, 1.0)],
            RoiAlign => vec![s(&[1, 2, 8, 8], -1.0, 1.0), s(&[1, 2, 4, 4], -1.0, 1.0)],
            Reshape => vec![s(&[2, 3, 2, 2], -1.0, 1.0)],
            Gather => vec![s(&[3, 4, 2, 2], -1.0, 1.0)],
            FocalLoss | FocalLossUnweighted => vec![s(&[2, 3, 3, 3], -3.0, 3.0)],
            Bce | Mse => vec![s(&[20], -3.0, 3.0)],
            IouLoss => vec![s(&[1, 4, 2, 3], 0.5, 3.0)],
            Sam => vec![
                s(&[2, 3, 4, 4], -1.0, 1.0),
                s(&[1, 2, 3, 3], -0.5, 0.5),
                s(&[1], -0.1, 0.1),
            ],
            Ese => vec![s(&[2, 4, 3, 3], -1.0, 1.0), s(&[4, 4], -0.5, 0.5), s(&[4], -0.1, 0.1)],
            Se => vec![
                s(&[2, 8, 3, 3], -1.0, 1.0),
                s(&[2, 8], -0.5, 0.5),
                s(&[2], 0.2, 0.3),
                s(&[8, 2], -0.5, 0.5),
                s(&[8], -0.1, 0.1),
            ],
        }
    }

    /// The operation's output; loss operations return their scalar directly.
    fn forward<T: Scalar>(self, tape: &mut Tape<T>, p: &[Var]) -> Result<Var> {
        use UnitOp::*;
        match self {
            Conv => tape.conv2d(p[0], p[1], p[2], 1, 1),
            ConvStrided => tape.conv2d(p[0], p[1], p[2], 2, 1),
            Deconv => tape.deconv2d_2x2(p[0], p[1], p[2]),
            ReduceMax => tape.reduce_channel(p[0], ReduceMode::Max),
            ReduceAvg => tape.reduce_channel(p[0], ReduceMode::Avg),
            GlobalAvgPool => tape.global_avg_pool(p[0]),
            FullyConnected => tape.fully_connected(p[0], p[1], p[2]),
            Sigmoid => tape.sigmoid(p[0]),
            Relu => tape.relu(p[0]),
            Exp => tape.exp(p[0]),
            Scale => tape.scale(p[0], -1.7),
            MulScalar => tape.mul_scalar(p[0], p[1]),
            Concat => tape.concat_channels(&[p[0], p[1]]),
            Add => tape.add(p[0], p[1]),
            ScaleChannels => tape.scale_channels(p[0], p[1]),
            ScaleSpatial => tape.scale_spatial(p[0], p[1]),
            MaxPool => tape.max_pool(p[0], 3, 2, 1),
            Upsample => tape.upsample_nearest2x(p[0]),
            RoiAlign => {
                let plans = vec![
                    RoiSample::plan(0, 0, 8, 8, ROI_BOXES[0], 3, 2),
                    RoiSample::plan(1, 0, 4, 4, ROI_BOXES[1], 3, 2),
                ];
                tape.roi_align(&[p[0], p[1]], plans, 3)
            }
            Reshape => tape.reshape(p[0], [6, 4]),
            Gather => tape.gather_channel(p[0], &[1, 3, 0]),
            Sum => tape.sum(p[0]),
            FocalLoss | FocalLossUnweighted => {
                let targets: Vec<i32> = (0..18).map(|i| (i * 5 % 4) as i32 - 1).collect();
                let alpha = (self == FocalLoss).then_some(0.25);
                tape.sigmoid_focal_loss(p[0], &targets, alpha, 2.0, 3.0)
            }
            Bce => {
                let t: Vec<f64> = (0..20).map(|i| (i * 7 % 11) as f64 / 10.0).collect();
                let w: Vec<f64> = (0..20).map(|i| (i % 3) as f64 * 0.5).collect();
                tape.bce_with_logits(p[0], &t, Some(&w), 4.0)
            }
            IouLoss => {
                let t: Vec<f64> = (0..24).map(|i| 0.7 + (i * 5 % 9) as f64 * 0.3).collect();
                let w = [0.0, 1.0, 0.5, 0.8, 0.2, 1.0];
                tape.iou_loss(p[0], &t, &w, 2.0)
            }
            Mse => {
                let t: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
                tape.mse_loss(p[0], &t)
            }
            Sam => sam_forward(tape, p[0], p[1], p[2]),
            Ese => ese_forward(tape, p[0], p[1], p[2]),
            Se => se_forward(tape, p[0], (p[1], p[2]), (p[3], p[4])),
        }
    }
}

/// A unit operation reduced to a scalar by squared distance to fixed targets.
struct UnitObjective {
    op: UnitOp,
    targets: Vec<f64>,
}

impl Objective for UnitObjective {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
        let out = self.op.forward(tape, params)?;
        if self.targets.is_empty() {
            Ok(out)
        } else {
            tape.mse_loss(out, &self.targets)
        }
    }
}

pub fn check_unit(op: UnitOp, seed: u64) -> Result<CaseResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = op.params(&mut rng);
    let mut probe = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| probe.param(p.cast())).collect();
    let out = op.forward(&mut probe, &vars)?;
    let n = probe.value(out).numel();
    let is_loss = matches!(
        op,
        UnitOp::Sum | UnitOp::FocalLoss | UnitOp::FocalLossUnweighted | UnitOp::Bce | UnitOp::IouLoss | UnitOp::Mse
    );
    let targets = if is_loss {
        Vec::new()
    } else {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let obj = UnitObjective { op, targets };
    let report = check_gradients(
        &obj,
        &params,
        &GradCheckOptions {
            seed,
            ..Default::default()
        },
    )?;
    Ok(CaseResult {
        name: op.name(),
        rel_error: report.max_rel_error(),
        tolerance: UNIT_TOLERANCE,
        checked: report.tensors.iter().map(|t| t.checked).sum(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// The narrowest model the architecture allows.
pub fn tiny_model_config(classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(Variant::V19, classes, true);
    let b = &mut cfg.backbone;
    b.stem = [4, 4, 8];
    for (i, s) in b.stages.iter_mut().enumerate() {
        s.conv_channels = 4;
        s.out_channels = 8 + 4 * i;
        s.module_count = 1;
        s.conv_count = 2;
    }
    b.fpn_channels = 8;
    cfg.head.tower_depth = 1;
    cfg.head.tower_channels = 8;
    cfg.mask.conv_count = 1;
    cfg.mask.channels = 8;
    cfg.mask.maskiou_convs = 1;
    cfg.mask.maskiou_fc = 8;
    cfg
}

struct ModelObjective {
    model: CenterMask,
    images: Tensor<f32>,
    gts: Vec<Vec<GroundTruth>>,
    loss: LossConfig,
    frozen: Option<FrozenMaskIou>,
}

impl Objective for ModelObjective {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
        let p = Bound::from_vars(params.to_vec());
        let x = tape.constant(self.images.cast());
        let parts = training_loss(&self.model, tape, &p, x, &self.gts, &self.loss, self.frozen.as_ref())?;
        Ok(parts.total)
    }
}

/// Whole training loss of [`tiny_model_config`] on two 32×32 scenes.
///
/// Mask RoIs come from ground truth only and the mask-IoU head's input and
/// targets are frozen, so the objective is a smooth function of the parameters. `entries` limits
/// the probes per tensor.
pub fn check_model(seed: u64, entries: usize) -> Result<CaseResult> {
    check_model_report(seed, entries, 1e-4).map(|(c, _)| c)
}

pub fn check_model_report(seed: u64, entries: usize, step: f64) -> Result<(CaseResult, Vec<(String, f64, f64)>)> {
    let start = Instant::now();
    let (model, store) = CenterMask::new(&tiny_model_config(2), seed)?;
    let samples = (0..2)
        .map(|i| generate_sample(seed.wrapping_add(i), 32, 32, 2))
        .collect::<Result<Vec<_>>>()?;
    let images = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let gts: Vec<Vec<GroundTruth>> = samples
        .iter()
        .map(|s| s.instances.iter().map(GroundTruth::from).collect())
        .collect();
    let loss = LossConfig {
        rois_from_detections: false,
        ..LossConfig::default()
    };
    let mut tape = Tape::<f32>::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(images.clone());
    let frozen = FrozenMaskIou::from_parts(&training_loss(&model, &mut tape, &p, x, &gts, &loss, None)?);
    let obj = ModelObjective {
        model,
        images,
        gts,
        loss,
        frozen,
    };
    let opts = GradCheckOptions {
        step,
        max_entries: Some(entries),
        seed,
    };
    let report = check_gradients(&obj, store.tensors(), &opts)?;
    let names: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
    let detail = report
        .tensors
        .iter()
        .map(|t| (names[t.index].to_string(), t.rel_error, t.analytic_norm))
        .collect();
    Ok((
        CaseResult {
            name: "model".into(),
            rel_error: report.global_rel_error(),
            tolerance: MODEL_TOLERANCE,
            checked: report.tensors.iter().map(|t| t.checked).sum(),
            seconds: start.elapsed().as_secs_f64(),
        },
        detail,
    ))
}

/// Every unit case followed by the full-model case.
pub fn run_suite(seed: u64, model_entries: usize) -> Result<Vec<CaseResult>> {
    let mut out = UNIT_OPS
        .iter()
        .map(|&op| check_unit(op, seed))
        .collect::<Result<Vec<_>>>()?;
    out.push(check_model(seed, model_entries)?);
    Ok(out)
}
