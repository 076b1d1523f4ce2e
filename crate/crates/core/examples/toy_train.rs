//! Trains the lite model on synthetic scenes and reports held-out AP.
//!
//! `cargo run --release --example toy_train -- [iterations] [eval_every]`

use std::time::Instant;

use centermask::io::{evaluate_model, Config};
use centermask::model::CenterMask;
use centermask::train::{default_milestones, Trainer};

fn main() -> centermask::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let iterations = args.first().copied().unwrap_or(2000);
    let eval_every = args.get(1).copied().unwrap_or(iterations);
    let mut cfg = Config::preset(true);
    cfg.train.iterations = iterations;
    cfg.train.sgd.milestones = default_milestones(iterations);
    let (model, params) = CenterMask::new(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, params, cfg.train.clone())?;
    let mut sink = std::io::sink();
    let mut train_secs = 0.0;
    while trainer.iteration < iterations {
        let until = (trainer.iteration + eval_every).min(iterations);
        let t0 = Instant::now();
        let rows = trainer.run(until, &mut sink, None)?;
        train_secs += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let mean = |r: &[_]| {
            r.iter()
                .map(|x: &centermask::train::MetricsRow| x.losses.total)
                .sum::<f64>()
                / r.len() as f64
        };
        let tail = &rows[rows.len().saturating_sub(50)..];
        let report = evaluate_model(&trainer.model, &trainer.params, &cfg.eval, cfg.train.max_instances)?;
        println!(
            "iter {until} train {:.1}s eval {:.1}s first {:.3} last50 {:.3} box50 {:.3} mask50 {:.3} box {:.3} mask {:.3}",
            train_secs,
            t1.elapsed().as_secs_f64(),
            rows[0].losses.total,
            mean(tail),
            report.boxes.at(0),
            report.masks.at(0),
            report.boxes.mean(),
            report.masks.mean()
        );
    }
    Ok(())
}
