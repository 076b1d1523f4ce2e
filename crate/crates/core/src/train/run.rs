use std::io::Write;
use std::path::Path;

use log::info;

use super::loss::{training_loss, GroundTruth, LossConfig, LossValues};
use super::sgd::{Sgd, SgdConfig};
use crate::data::generate_sample;
use crate::error::{Error, Result};
use crate::io::weights::{load_entries, save_entries};
use crate::model::CenterMask;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub loss: LossConfig,
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
    pub image_size: usize,
    pub max_instances: usize,
    /// Cycle over this many fixed scenes; 0 draws a fresh scene every time.
    pub pool: usize,
    /// Write a checkpoint every this many iterations; 0 disables it.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(iterations: usize) -> Self {
        TrainConfig {
            sgd: SgdConfig {
                lr: 0.005,
                momentum: 0.9,
                weight_decay: 1e-4,
                milestones: default_milestones(iterations),
                gamma: 0.1,
                warmup_iters: 0,
                warmup_factor: 1.0,
                clip_norm: 0.0,
            },
            loss: LossConfig::default(),
            iterations,
            batch: 4,
            seed: 0,
            image_size: 64,
            max_instances: 5,
            pool: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("train config: {m}")));
        if self.batch == 0 || self.iterations == 0 || self.max_instances == 0 {
            return bad("batch, iterations and max_instances must be positive".into());
        }
        if let Some(m) = self.sgd.milestones.iter().find(|&&m| m == 0 || m >= self.iterations) {
            return bad(format!("milestone {m} is not inside (0, {})", self.iterations));
        }
        if !(self.sgd.lr > 0.0) || !(0.0..1.0).contains(&self.sgd.momentum) {
            return bad("lr must be positive and momentum in [0, 1)".into());
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!(
                "image_size {} is not a positive multiple of 32",
                self.image_size
            ));
        }
        Ok(())
    }

    /// Seed of the `index`-th training scene.
    pub fn sample_seed(&self, index: usize) -> u64 {
        let index = if self.pool > 0 { index % self.pool } else { index };
        splitmix64(self.seed ^ splitmix64(index as u64 ^ 0x7f4a_7c15))
    }
}

/// Rate drops at 2/3 and 8/9 of the budget.
pub fn default_milestones(iterations: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [2 * iterations / 3, 8 * iterations / 9]
        .into_iter()
        .filter(|&m| m > 0 && m < iterations)
        .collect();
    v.dedup();
    v
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub lr: f64,
    pub losses: LossValues,
}

pub const METRICS_HEADER: &str = "# iter\tlr\tcls\tctr\tbox\tmask\tmaskiou\ttotal";

impl MetricsRow {
    pub fn to_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.iteration, self.lr, l.cls, l.ctr, l.bbox, l.mask, l.maskiou, l.total
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::Invalid(format!("metrics line has {} fields: {line:?}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Invalid(format!("bad number {s:?}")))
        };
        Ok(MetricsRow {
            iteration: f[0]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad iteration {:?}", f[0])))?,
            lr: num(f[1])?,
            losses: LossValues {
                cls: num(f[2])?,
                ctr: num(f[3])?,
                bbox: num(f[4])?,
                mask: num(f[5])?,
                maskiou: num(f[6])?,
                total: num(f[7])?,
            },
        })
    }
}

const VELOCITY_PREFIX: &str = "optimizer.velocity.";
const ITERATION_KEY: &str = "trainer.iteration";

/// Single-owner training state: model, parameters, optimizer and position.
pub struct Trainer {
    pub model: CenterMask,
    pub params: ParamStore<f32>,
    pub opt: Sgd,
    pub cfg: TrainConfig,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(model: CenterMask, params: ParamStore<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Sgd::new(cfg.sgd.clone(), &params);
        Ok(Trainer {
            model,
            params,
            opt,
            cfg,
            iteration: 0,
        })
    }

    /// Images and annotations of the batch used at `iteration`.
    pub fn batch(&self, iteration: usize) -> Result<(Tensor<f32>, Vec<Vec<GroundTruth>>)> {
        let mut images = Vec::with_capacity(self.cfg.batch);
        let mut gts = Vec::with_capacity(self.cfg.batch);
        for b in 0..self.cfg.batch {
            let seed = self.cfg.sample_seed(iteration * self.cfg.batch + b);
            let s = generate_sample(seed, self.cfg.image_size, self.cfg.image_size, self.cfg.max_instances)?;
            gts.push(s.instances.iter().map(GroundTruth::from).collect());
            images.push(s.image);
        }
        Ok((Tensor::stack(&images)?, gts))
    }

    /// One forward, backward and update.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let (images, gts) = self.batch(self.iteration)?;
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(images);
        let parts = training_loss(&self.model, &mut tape, &p, x, &gts, &self.cfg.loss, None)?;
        let losses = parts.values(&tape);
        tape.backward(parts.total)?;
        self.params.absorb_grads(&mut tape, &p);
        let lr = self.opt.cfg.lr_at(self.iteration);
        self.opt.step(&mut self.params, self.iteration)?;
        let row = MetricsRow {
            iteration: self.iteration,
            lr,
            losses,
        };
        self.iteration += 1;
        Ok(row)
    }

    /// Trains until `until` (capped at the budget), writing one metrics line per
    /// iteration and, if `checkpoint_dir` is given, periodic checkpoints.
    pub fn run(&mut self, until: usize, log: &mut dyn Write, checkpoint_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
        let until = until.min(self.cfg.iterations);
        let mut rows = Vec::new();
        while self.iteration < until {
            let row = self.step()?;
            writeln!(log, "{}", row.to_line())?;
            if row.iteration % 50 == 0 {
                info!("iter {} lr {:.5} loss {:.4}", row.iteration, row.lr, row.losses.total);
            }
            if let (Some(dir), every) = (checkpoint_dir, self.cfg.checkpoint_every) {
                if every > 0 && self.iteration % every == 0 {
                    self.save_checkpoint(&dir.join(format!("checkpoint_{:06}.cmkw", self.iteration)))?;
                }
            }
            rows.push(row);
        }
        log.flush()?;
        Ok(rows)
    }

    /// Parameters, optimizer velocity and iteration in one weights file.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = self
            .params
            .iter()
            .map(|(_, n, _)| format!("{VELOCITY_PREFIX}{n}"))
            .collect();
        let iteration = Tensor::new(vec![2], split_u64(self.iteration as u64))?;
        let mut entries: Vec<(&str, &Tensor<f32>)> = self.params.iter().map(|(_, n, t)| (n, t)).collect();
        entries.extend(names.iter().map(String::as_str).zip(&self.opt.velocity));
        entries.push((ITERATION_KEY, &iteration));
        save_entries(path, &entries)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        let mut iteration = None;
        for (name, t) in load_entries(path)? {
            if name == ITERATION_KEY {
                iteration = Some(join_u64(t.data())?);
            } else if let Some(rest) = name.strip_prefix(VELOCITY_PREFIX) {
                velocity.push((rest.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        let iteration = iteration.ok_or_else(|| Error::Weights(format!("{ITERATION_KEY} missing")))?;
        crate::io::weights::assign_params(&mut self.params, params)?;
        let mut vstore = self.params.clone();
        crate::io::weights::assign_params(&mut vstore, velocity)?;
        self.opt.velocity = vstore.tensors().to_vec();
        self.iteration = iteration as usize;
        Ok(())
    }
}

/// Stores a u64 losslessly as two f32 holding 32-bit halves' bit patterns.
fn split_u64(v: u64) -> Vec<f32> {
    vec![f32::from_bits((v >> 32) as u32), f32::from_bits(v as u32)]
}

fn join_u64(d: &[f32]) -> Result<u64> {
    match d {
        [hi, lo] => Ok(((hi.to_bits() as u64) << 32) | lo.to_bits() as u64),
        _ => Err(Error::Weights(format!("{ITERATION_KEY} has {} values", d.len()))),
    }
}
