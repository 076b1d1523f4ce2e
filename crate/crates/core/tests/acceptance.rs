//! Release gate. Runs every headline criterion in sequence (the training
//! budget is wall-clock, so nothing else runs alongside it) and prints one
//! line per criterion. Pass a substring to run a subset.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use centermask::backbone::{ese_forward, ese_param_count, se_param_count, Attention, OsaConfig, OsaModule};
use centermask::bench::bench;
use centermask::data::generate_sample;
use centermask::fcos::nms;
use centermask::gradsuite::run_suite;
use centermask::io::{
    evaluate_model, held_out_scenes, load_params, predict_scenes, rle_decode, rle_encode, save_params, Config,
};
use centermask::mask::{assign_level_adaptive, assign_level_canonical, sam_forward, AssignConfig};
use centermask::model::{CenterMask, ModelConfig};
use centermask::params::ParamStore;
use centermask::tensor::RoiSample;
use centermask::train::{default_milestones, fcos_assign_targets, MetricsRow, Trainer, DEFAULT_RANGES};
use centermask::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{naive_conv, naive_fc, nms_oracle, pyramid_sizes, random_dets, random_scene, roi_oracle, targets_oracle};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = run_suite(0, 16).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} {:.2e}", c.name, c.rel_error))
        .collect();
    let unit = cases[..cases.len() - 1].iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let model = cases.last().unwrap();
    let bounds = cases[..cases.len() - 1].iter().all(|c| c.tolerance <= 1e-3) && model.tolerance <= 1e-2;
    check(
        failed.is_empty() && bounds && secs < 600.0,
        format!(
            "{} unit ops max rel {unit:.2e} (< 1e-3), model rel {:.2e} (< 1e-2), {secs:.1}s (< 600s){}",
            cases.len() - 1,
            model.rel_error,
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join(", "))
            }
        ),
    )
}

fn roi_assignment() -> Outcome {
    let c = AssignConfig::default();
    let canonical = assign_level_canonical(224.0, 224.0, &c).map_err(|e| e.to_string())?;
    let adaptive = assign_level_adaptive(224.0, 224.0, 1024.0 * 1024.0, &c).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut checked, mut violations) = (0, 0);
    while checked < 1000 {
        let (iw, ih) = (rng.random_range(32.0..2048.0f64), rng.random_range(32.0..2048.0f64));
        let (w, h) = (rng.random_range(0.5..=1.0) * iw, rng.random_range(0.5..=1.0) * ih);
        if w * h <= 0.5 * iw * ih {
            continue;
        }
        checked += 1;
        if assign_level_adaptive(w, h, iw * ih, &c).unwrap() != c.k_max {
            violations += 1;
        }
    }
    let mut grid = Vec::with_capacity(10_000);
    for w in 1..=100 {
        for h in 1..=100 {
            let (wf, hf) = (w as f64 * 4.0, h as f64 * 4.0);
            let a = assign_level_canonical(wf, hf, &c).unwrap();
            let b = assign_level_adaptive(wf, hf, 400.0 * 400.0, &c).unwrap();
            grid.push((wf * hf, a, b));
        }
    }
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));
    let drops = grid
        .windows(2)
        .filter(|p| p[1].1 < p[0].1 || p[1].2 < p[0].2 || (p[0].0 == p[1].0 && (p[0].1, p[0].2) != (p[1].1, p[1].2)))
        .count();
    check(
        canonical == 4 && adaptive == 3 && violations == 0 && drops == 0,
        format!(
            "224² → P{canonical} (fixed), 224² in 1024² → P{adaptive}, {violations}/{checked} sweep violations, {drops} monotonicity breaks"
        ),
    )
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    // The operations run in double precision so the comparison isolates
    // indexing and accumulation order from f32 rounding.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut random = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0f32));
    let mut conv_err = 0.0f64;
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        let (x, w, b) = (random(&[2, 5, 9, 8]), random(&[4, 5, k, k]), random(&[4]));
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (
            tape.constant(x.cast()),
            tape.constant(w.cast()),
            tape.constant(b.cast()),
        );
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        conv_err = conv_err.max(max_gap(
            tape.value(y).data(),
            &naive_conv(&x, &w, b.data(), stride, pad),
        ));
    }
    let (x, w, b) = (random(&[3, 17]), random(&[6, 17]), random(&[6]));
    let mut tape = Tape::<f64>::new();
    let (xv, wv, bv) = (
        tape.constant(x.cast()),
        tape.constant(w.cast()),
        tape.constant(b.cast()),
    );
    let y = tape.fully_connected(xv, wv, bv).unwrap();
    let fc_err = max_gap(tape.value(y).data(), &naive_fc(&x, &w, b.data()));

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut roi_err = 0.0f64;
    for _ in 0..50 {
        let map = Tensor::from_fn(vec![1, 3, 9, 11], |_| rng.random_range(-1.0..1.0f32));
        let (x1, y1) = (rng.random_range(-1.0..8.0), rng.random_range(-1.0..6.0));
        let bbox = [x1, y1, x1 + rng.random_range(0.2..6.0), y1 + rng.random_range(0.2..5.0)];
        let s = rng.random_range(1..4);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(map.cast());
        let y = tape
            .roi_align(&[v], vec![RoiSample::plan(0, 0, 9, 11, bbox, 14, s)], 14)
            .unwrap();
        roi_err = roi_err.max(max_gap(tape.value(y).data(), &roi_oracle(&map, bbox, 14, s)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let nms_mismatch = (0..200)
        .filter(|_| {
            let dets = random_dets(&mut rng, 50);
            nms(&dets, 0.6, 100) != nms_oracle(&dets, 0.6, 100)
        })
        .count();

    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut target_mismatch = 0;
    for scene in 0..100 {
        let side = if scene % 5 == 4 { 1024 } else { 64 };
        let gt = random_scene(&mut rng, side as f32, 3);
        let sizes = pyramid_sizes(side);
        let t = fcos_assign_targets(&gt, &sizes, &DEFAULT_RANGES, 0.5).unwrap();
        let same = t.levels.iter().zip(&sizes).all(|(lt, &(k, n, _))| {
            targets_oracle(&gt, k, n)
                .iter()
                .enumerate()
                .all(|(i, (label, off))| lt.labels[i] == *label && lt.boxes[i] == *off)
        });
        target_mismatch += usize::from(!same);
    }
    check(
        conv_err <= 1e-6 && fc_err <= 1e-6 && roi_err <= 1e-6 && nms_mismatch == 0 && target_mismatch == 0,
        format!(
            "conv {conv_err:.1e}, fc {fc_err:.1e}, roi_align {roi_err:.1e} (≤ 1e-6); nms {nms_mismatch}/200, targets {target_mismatch}/100 scenes differ"
        ),
    )
}

fn attention_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = Tensor::from_fn(vec![2, 6, 5, 5], |_| rng.random_range(-3.0..3.0f32));
    let half: Vec<f32> = x.data().iter().map(|v| v * 0.5).collect();
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let (w, b) = (
        tape.constant(Tensor::zeros(vec![1, 2, 3, 3])),
        tape.constant(Tensor::zeros(vec![1])),
    );
    let sam = sam_forward(&mut tape, xv, w, b).unwrap();
    let (w, b) = (
        tape.constant(Tensor::zeros(vec![6, 6])),
        tape.constant(Tensor::zeros(vec![6])),
    );
    let ese = ese_forward(&mut tape, xv, w, b).unwrap();
    let sam_ok = tape.value(sam).data() == half.as_slice();
    let ese_ok = tape.value(ese).data() == half.as_slice();

    let cfg = OsaConfig {
        conv_count: 3,
        conv_channels: 4,
        out_channels: 6,
        module_count: 1,
        residual: true,
        attention: Attention::Ese,
        se_reduction: 16,
        kernel: 3,
    };
    let mut store = ParamStore::new();
    let m = OsaModule::new(&mut store, "m", 6, &cfg, &mut rng).unwrap();
    for t in store.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let mut tape = Tape::<f32>::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = m.forward(&mut tape, &p, xv).unwrap();
    let osa_ok = tape.value(y).data() == x.data();

    let widths = [256usize, 512, 768, 1024];
    let counts_ok = widths
        .iter()
        .all(|&c| ese_param_count(c) == c * c + c && ese_param_count(c) > se_param_count(c, 16));
    let mut store = ParamStore::new();
    let bare = OsaModule::new(
        &mut store,
        "a",
        8,
        &OsaConfig {
            attention: Attention::None,
            out_channels: 32,
            ..cfg.clone()
        },
        &mut rng,
    )
    .map(|_| store.count())
    .unwrap();
    let mut store = ParamStore::new();
    OsaModule::new(
        &mut store,
        "b",
        8,
        &OsaConfig {
            out_channels: 32,
            ..cfg
        },
        &mut rng,
    )
    .unwrap();
    let module_ok = store.count() - bare == 32 * 32 + 32;
    check(
        sam_ok && ese_ok && osa_ok && counts_ok && module_ok,
        format!(
            "SAM ×0.5 {sam_ok}, eSE ×0.5 {ese_ok}, OSA identity {osa_ok}, eSE C²+C {module_ok}, eSE > SE(16) at {widths:?} {counts_ok}"
        ),
    )
}

fn toy_training() -> Outcome {
    let cfg = Config::preset(true);
    let t = &cfg.train;
    if (t.iterations, t.batch, t.seed, t.image_size, cfg.eval.count) != (2000, 4, 0, 64, 100) {
        return Err("lite preset drifted from the 2K × 4 × 64² protocol".into());
    }
    let start = Instant::now();
    let (model, params) = CenterMask::new(&cfg.model, t.seed).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, params, t.clone()).map_err(|e| e.to_string())?;
    let log_path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("toy_metrics.tsv");
    let mut log = fs::File::create(&log_path).map_err(|e| e.to_string())?;
    let rows: Vec<MetricsRow> = trainer.run(t.iterations, &mut log, None).map_err(|e| e.to_string())?;
    let report =
        evaluate_model(&trainer.model, &trainer.params, &cfg.eval, t.max_instances).map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let (first, last) = (rows[0].losses.total, rows.last().unwrap().losses.total);
    let tail = &rows[rows.len() - 50..];
    let smoothed = tail.iter().map(|r| r.losses.total).sum::<f64>() / tail.len() as f64;
    let (box50, mask50) = (report.boxes.at(0), report.masks.at(0));
    check(
        box50 >= 0.60 && mask50 >= 0.50 && minutes < 45.0 && last < 0.25 * first,
        format!(
            "box AP50 {box50:.3} (≥ 0.60), mask AP50 {mask50:.3} (≥ 0.50), {minutes:.1} min (< 45), loss {first:.3} → {last:.3} = {:.1}% (< 25%; last-50 mean {:.1}%)",
            100.0 * last / first,
            100.0 * smoothed / first
        ),
    )
}

fn lite_vs_base() -> Outcome {
    let lite = bench(&ModelConfig::lite(3), 128, 1, 50, 5, 0).map_err(|e| e.to_string())?;
    let base = bench(&ModelConfig::base(3), 128, 1, 50, 5, 0).map_err(|e| e.to_string())?;
    let (lm, bm) = (lite.total_macs(), base.total_macs());
    let (lt, bt) = (lite.total_median(), base.total_median());
    check(
        lm < bm && lt < bt,
        format!(
            "128², 50 RoIs: lite {:.3} GMAC {:.1} ms, base {:.3} GMAC {:.1} ms",
            lm as f64 / 1e9,
            lt * 1e3,
            bm as f64 / 1e9,
            bt * 1e3
        ),
    )
}

fn short_run(dir: &std::path::Path, tag: &str) -> centermask::Result<(Vec<u8>, String)> {
    let mut cfg = Config::preset(true);
    cfg.train.iterations = 3;
    cfg.train.sgd.milestones = default_milestones(3);
    cfg.train.seed = 17;
    let (model, params) = CenterMask::new(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, params, cfg.train.clone())?;
    trainer.run(3, &mut std::io::sink(), None)?;
    let path = dir.join(format!("{tag}.cmkw"));
    save_params(&path, &trainer.params)?;
    cfg.eval.count = 4;
    let scenes = held_out_scenes(&cfg.eval, cfg.train.max_instances)?;
    let records = predict_scenes(&trainer.model, &trainer.params, &scenes)?;
    Ok((fs::read(&path)?, serde_json::to_string(&records)?))
}

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (_, params) = CenterMask::new(&ModelConfig::lite(3), 3).map_err(|e| e.to_string())?;
    let path = dir.path().join("w.cmkw");
    save_params(&path, &params).map_err(|e| e.to_string())?;
    let (_, mut fresh) = CenterMask::new(&ModelConfig::lite(3), 4).map_err(|e| e.to_string())?;
    load_params(&path, &mut fresh).map_err(|e| e.to_string())?;
    let bits = |s: &ParamStore<f32>| {
        s.iter()
            .flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()))
            .collect::<Vec<_>>()
    };
    let weights_ok = bits(&params) == bits(&fresh);

    let mut masks = 0;
    let mut rle_ok = true;
    for seed in 0..200 {
        for inst in generate_sample(seed, 64, 64, 5).map_err(|e| e.to_string())?.instances {
            masks += 1;
            rle_ok &= rle_decode(&rle_encode(&inst.mask))
                .map(|m| m == inst.mask)
                .unwrap_or(false);
        }
    }

    let a = short_run(dir.path(), "a").map_err(|e| e.to_string())?;
    let b = short_run(dir.path(), "b").map_err(|e| e.to_string())?;
    let repro = a == b;
    check(
        weights_ok && rle_ok && repro,
        format!("weights bitwise {weights_ok}, RLE on {masks} masks {rle_ok}, two same-seed train+infer runs identical {repro}"),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient_suite", gradient_suite),
        ("roi_assignment", roi_assignment),
        ("oracle_equivalence", oracle_equivalence),
        ("attention_identities", attention_identities),
        ("toy_training", toy_training),
        ("lite_vs_base", lite_vs_base),
        ("serialization", serialization),
    ];
    let mut out = std::io::stdout();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(outcome.is_err());
        writeln!(out, "{tag} {name}: {detail}").unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        writeln!(out, "{failed} criteria failed").unwrap();
        std::process::exit(1);
    }
}
