use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use centermask::bench::bench;
use centermask::data::{generate_sample, Shape};
use centermask::gradsuite::run_suite;
use centermask::io::{
    coco_thresholds, evaluate_ap, evaluate_model, load_params, read_json, render_overlay, save_params, save_rgb_png,
    write_json, Config, Dataset, EvalReport, ResultRecord,
};
use centermask::model::CenterMask;
use centermask::train::{Trainer, METRICS_HEADER};
use centermask::{Error, Result};

#[derive(Parser)]
#[command(name = "centermask", version, about = "Anchor-free instance segmentation on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Settings file; see `centermask config` for every key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the lite preset when no config file is given.
    #[arg(long)]
    lite: bool,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::preset(self.lite),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic scenes; writes weights, metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Segment PNG images; writes results.json and one overlay per image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "infer")]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Box and mask AP, either of saved results against a dataset file or of
    /// a weights file on the held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "results")]
        weights: Option<PathBuf>,
        #[arg(long, requires = "gt")]
        results: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every operation and of the whole loss.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Probed entries per parameter tensor in the whole-model check.
        #[arg(long, default_value_t = 16)]
        entries: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stage timing and multiply-accumulate counts.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Square input sides, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "64,128")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Mask RoIs per pass.
        #[arg(long, default_value_t = 50)]
        rois: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic scenes as PNGs plus a dataset JSON.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Print every setting with its default.
    Config {
        #[arg(long)]
        lite: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::file(p, e))
}

fn write_report<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn print_ap(report: &EvalReport) {
    for (name, t) in [("box", &report.boxes), ("mask", &report.masks)] {
        println!(
            "{name:>4}  AP {:.4}  AP50 {:.4}  AP75 {:.4}",
            t.mean(),
            t.at_threshold(0.5).unwrap_or(f64::NAN),
            t.at_threshold(0.75).unwrap_or(f64::NAN)
        );
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train { common, weights, out } => {
            let cfg = common.load()?;
            create_dir(&out)?;
            fs::write(out.join("config.txt"), cfg.to_text()).map_err(|e| Error::file(out.join("config.txt"), e))?;
            let (model, params) = CenterMask::new(&cfg.model, cfg.train.seed)?;
            let mut trainer = Trainer::new(model, params, cfg.train.clone())?;
            let metrics_path = out.join("metrics.tsv");
            let file = if let Some(ckpt) = &weights {
                trainer.load_checkpoint(ckpt)?;
                info!("resuming at iteration {}", trainer.iteration);
                fs::OpenOptions::new().append(true).create(true).open(&metrics_path)
            } else {
                fs::File::create(&metrics_path)
            }
            .map_err(|e| Error::file(&metrics_path, e))?;
            let mut log = BufWriter::new(file);
            if weights.is_none() {
                writeln!(log, "{METRICS_HEADER}")?;
            }
            trainer.run(cfg.train.iterations, &mut log, Some(&out))?;
            save_params(&out.join("final.cmkw"), &trainer.params)?;
            trainer.save_checkpoint(&out.join("final_checkpoint.cmkw"))?;
            let report = evaluate_model(&trainer.model, &trainer.params, &cfg.eval, cfg.train.max_instances)?;
            write_json(&out.join("eval.json"), &report)?;
            print_ap(&report);
        }
        Command::Infer {
            common,
            weights,
            out,
            images,
        } => {
            let cfg = common.load()?;
            let (model, mut params) = CenterMask::new(&cfg.model, cfg.train.seed)?;
            load_params(&weights, &mut params)?;
            create_dir(&out)?;
            let names: Vec<&str> = Shape::ALL.iter().map(|s| s.name()).collect();
            let mut records = Vec::new();
            for (id, path) in images.iter().enumerate() {
                let img = image::open(path)?.to_rgb8();
                let (h, w) = (img.height() as usize, img.width() as usize);
                let kept = model.infer_rgb(&params, img.as_raw(), h, w)?;
                records.extend(kept.iter().map(|r| ResultRecord::from_instance(id as u64, r)));
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let overlay = render_overlay(img.as_raw(), h, w, &kept, &names)?;
                let target = out.join(format!("{id:04}_{stem}_overlay.png"));
                overlay.save(&target)?;
                info!("{}: {} instances", path.display(), kept.len());
            }
            write_json(&out.join("results.json"), &records)?;
        }
        Command::Eval {
            common,
            weights,
            results,
            gt,
            out,
        } => {
            let cfg = common.load()?;
            let report = match (weights, results, gt) {
                (_, Some(r), Some(g)) => {
                    let results: Vec<ResultRecord> = read_json(&r)?;
                    let gt: Dataset = read_json(&g)?;
                    evaluate_ap(&results, &gt, &coco_thresholds())?
                }
                (Some(wp), None, _) => {
                    let (model, mut params) = CenterMask::new(&cfg.model, cfg.train.seed)?;
                    load_params(&wp, &mut params)?;
                    evaluate_model(&model, &params, &cfg.eval, cfg.train.max_instances)?
                }
                _ => return Err(Error::Invalid("eval needs --weights, or --results with --gt".into())),
            };
            print_ap(&report);
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
        }
        Command::GradCheck { common, entries, out } => {
            let seed = common.seed.unwrap_or(0);
            let cases = run_suite(seed, entries)?;
            let mut ok = true;
            for c in &cases {
                ok &= c.passed();
                println!(
                    "{:<22} rel {:.3e} < {:.0e}  {:>5} probes  {:6.2}s  {}",
                    c.name,
                    c.rel_error,
                    c.tolerance,
                    c.checked,
                    c.seconds,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            write_report(out.as_deref(), &cases).ok();
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Bench {
            common,
            sizes,
            repetitions,
            batch,
            rois,
            out,
        } => {
            let cfg = common.load()?;
            let mut reports = Vec::new();
            for size in sizes {
                let r = bench(&cfg.model, size, batch, rois, repetitions, cfg.train.seed)?;
                println!("size {size}  batch {batch}  rois {rois}");
                for s in &r.stages {
                    println!(
                        "  {:<9} median {:8.2} ms  p95 {:8.2} ms  {:>14} MACs",
                        s.stage,
                        s.median * 1e3,
                        s.p95 * 1e3,
                        s.macs
                    );
                }
                println!(
                    "  {:<9} median {:8.2} ms  {:>29} MACs",
                    "total",
                    r.total_median() * 1e3,
                    r.total_macs()
                );
                reports.push(r);
            }
            if let Some(p) = out {
                write_json(&p, &reports)?;
            }
        }
        Command::GenData {
            common,
            count,
            size,
            out,
        } => {
            let cfg = common.load()?;
            create_dir(&out)?;
            let samples = (0..count as u64)
                .map(|i| generate_sample(cfg.train.seed + i, size, size, cfg.train.max_instances))
                .collect::<Result<Vec<_>>>()?;
            for s in &samples {
                save_rgb_png(&out.join(format!("{:08}.png", s.seed)), &s.rgb, s.height, s.width)?;
            }
            write_json(&out.join("dataset.json"), &Dataset::from_samples(&samples))?;
            info!("wrote {count} scenes to {}", out.display());
        }
        Command::Config { lite } => print!("{}", Config::reference(lite)),
    }
    Ok(ExitCode::SUCCESS)
}
