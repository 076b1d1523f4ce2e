use centermask::bench::{bench, median, percentile, synthetic_rois, STAGES};
use centermask::gradsuite::tiny_model_config;
use centermask::model::ModelConfig;
use centermask::{Tape, Tensor};

#[test]
fn one_repetition_per_sample() {
    let r = bench(&tiny_model_config(3), 64, 1, 4, 3, 0).unwrap();
    assert_eq!(r.stages.iter().map(|s| s.stage.as_str()).collect::<Vec<_>>(), STAGES);
    for s in &r.stages {
        assert_eq!(s.samples.len(), 3);
        assert!(s.macs > 0, "{}", s.stage);
        assert!(s.median <= s.p95);
    }
    assert!(bench(&tiny_model_config(3), 64, 1, 4, 0, 0).is_err());
    assert!(bench(&tiny_model_config(3), 48, 1, 4, 1, 0).is_err());
}

#[test]
fn doubling_the_side_quadruples_backbone_work() {
    for cfg in [tiny_model_config(3), ModelConfig::lite(3)] {
        let small = bench(&cfg, 64, 1, 8, 1, 0).unwrap();
        let large = bench(&cfg, 128, 1, 8, 1, 0).unwrap();
        for stage in ["backbone", "fpn", "heads"] {
            let ratio = large.stage(stage).unwrap().macs as f64 / small.stage(stage).unwrap().macs as f64;
            assert!((ratio - 4.0).abs() < 0.2, "{stage}: {ratio}");
        }
        // RoIs scale with the image, so the pooled work stays the same.
        assert_eq!(small.stage("mask").unwrap().macs, large.stage("mask").unwrap().macs);
    }
}

#[test]
fn lite_does_less_work_than_base() {
    let lite = bench(&ModelConfig::lite(3), 64, 1, 10, 1, 0).unwrap();
    let base = bench(&ModelConfig::base(3), 64, 1, 10, 1, 0).unwrap();
    for s in STAGES {
        assert!(lite.stage(s).unwrap().macs < base.stage(s).unwrap().macs, "{s}");
    }
}

#[test]
fn convolution_macs_match_the_formula() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 3, 10, 12]));
    let w = tape.constant(Tensor::zeros(vec![5, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(vec![5]));
    tape.conv2d(x, w, b, 2, 1).unwrap();
    // Output 5×5×6 per image.
    assert_eq!(tape.macs(), 2 * 5 * 5 * 6 * 3 * 9);
}

#[test]
fn order_statistics() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[]).is_nan());
    let xs: Vec<f64> = (1..=20).map(f64::from).collect();
    assert_eq!(percentile(&xs, 0.95), 19.0);
    assert_eq!(percentile(&xs, 1.0), 20.0);
    assert_eq!(percentile(&xs, 0.0), 1.0);
}

#[test]
fn synthetic_rois_are_deterministic_and_inside() {
    let cfg = ModelConfig::lite(3);
    let a = synthetic_rois(128, 50, &cfg).unwrap();
    assert_eq!(a.len(), 50);
    for r in &a {
        let [x1, y1, x2, y2] = r.bbox;
        assert!(0.0 <= x1 && x1 < x2 && x2 <= 128.0 && 0.0 <= y1 && y1 < y2 && y2 <= 128.0);
    }
    let b = synthetic_rois(128, 50, &cfg).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.bbox == q.bbox && p.level == q.level));
}
