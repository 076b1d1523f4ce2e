//! Per-stage wall time and multiply-accumulate counts of one forward pass.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fcos::Detection;
use crate::mask::Roi;
use crate::model::{CenterMask, ModelConfig};
use crate::tensor::{Tape, Tensor};

pub const STAGES: [&str; 4] = ["backbone", "fpn", "heads", "mask"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    /// Seconds, one per repetition.
    pub samples: Vec<f64>,
    pub median: f64,
    pub p95: f64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub size: usize,
    pub batch: usize,
    pub rois: usize,
    pub stages: Vec<StageReport>,
}

impl BenchReport {
    pub fn total_macs(&self) -> u64 {
        self.stages.iter().map(|s| s.macs).sum()
    }

    pub fn total_median(&self) -> f64 {
        self.stages.iter().map(|s| s.median).sum()
    }

    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Nearest-rank percentile of `xs` (`q` in [0, 1]).
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A fixed spread of square RoIs from 1/8 to 3/4 of the image side, so the
/// mask stage does the same work on every run.
pub fn synthetic_rois(size: usize, count: usize, cfg: &ModelConfig) -> Result<Vec<Roi>> {
    let s = size as f32;
    let mut rois = Vec::with_capacity(count);
    for i in 0..count {
        let t = i as f32 / count.max(2).saturating_sub(1) as f32;
        let side = s * (0.125 + 0.625 * t);
        let cx = s * (0.3 + 0.4 * ((i * 7 % 11) as f32 / 10.0));
        let cy = s * (0.3 + 0.4 * ((i * 3 % 7) as f32 / 6.0));
        let bbox = [
            (cx - side / 2.0).max(0.0),
            (cy - side / 2.0).max(0.0),
            (cx + side / 2.0).min(s),
            (cy + side / 2.0).min(s),
        ];
        let det = Detection {
            bbox,
            label: i % cfg.classes,
            score: 1.0,
            level: 3,
            centerness: 1.0,
        };
        let roi = Roi::from_detection(&det, 0, size, size, &cfg.mask.assign)?
            .ok_or_else(|| Error::Invalid("degenerate benchmark RoI".into()))?;
        rois.push(roi);
    }
    Ok(rois)
}

/// Times each stage of the model on a constant `batch`×3×`size`×`size` input
/// with `rois` mask RoIs. Stages run in sequence on one tape per repetition.
pub fn bench(
    cfg: &ModelConfig,
    size: usize,
    batch: usize,
    rois: usize,
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repetitions == 0 || size == 0 || size % 32 != 0 || batch == 0 {
        return Err(Error::Invalid(
            "bench needs repetitions > 0 and a positive size divisible by 32".into(),
        ));
    }
    let (model, params) = CenterMask::new(cfg, seed)?;
    let input = Tensor::from_fn(vec![batch, 3, size, size], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
    let roi_list = synthetic_rois(size, rois, cfg)?;
    let mut samples = vec![Vec::with_capacity(repetitions); STAGES.len()];
    let mut macs = [0u64; 4];
    for rep in 0..repetitions {
        let mut tape = Tape::<f32>::new();
        let p = params.bind(&mut tape);
        let x = tape.constant(input.clone());
        let mut marks = [(0.0, 0u64); 4];
        let clock = |tape: &Tape<f32>, start: Instant, m0: u64| (start.elapsed().as_secs_f64(), tape.macs() - m0);

        let (t, m) = (Instant::now(), tape.macs());
        let cs = model.backbone_forward(&mut tape, &p, x)?;
        marks[0] = clock(&tape, t, m);
        let (t, m) = (Instant::now(), tape.macs());
        let pyramid = model.fpn_forward(&mut tape, &p, cs)?;
        marks[1] = clock(&tape, t, m);
        let (t, m) = (Instant::now(), tape.macs());
        model.head_forward(&mut tape, &p, &pyramid)?;
        marks[2] = clock(&tape, t, m);
        let (t, m) = (Instant::now(), tape.macs());
        if !roi_list.is_empty() {
            model.mask_branch().forward(&mut tape, &p, &pyramid, &roi_list)?;
        }
        marks[3] = clock(&tape, t, m);

        for (i, (secs, ops)) in marks.into_iter().enumerate() {
            samples[i].push(secs);
            if rep == 0 {
                macs[i] = ops;
            } else if macs[i] != ops {
                return Err(Error::Invalid(format!("{} op count changed between runs", STAGES[i])));
            }
        }
    }
    let stages = STAGES
        .iter()
        .zip(samples)
        .zip(macs)
        .map(|((name, s), m)| StageReport {
            stage: name.to_string(),
            median: median(&s),
            p95: percentile(&s, 0.95),
            samples: s,
            macs: m,
        })
        .collect();
    Ok(BenchReport {
        size,
        batch,
        rois,
        stages,
    })
}
