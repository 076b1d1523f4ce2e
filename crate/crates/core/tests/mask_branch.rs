use centermask::backbone::FeaturePyramid;
use centermask::fcos::Detection;
use centermask::mask::{paste_mask, recalibrate_score, sam_forward, MaskBranch, MaskConfig, Roi};
use centermask::params::ParamStore;
use centermask::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det(bbox: [f32; 4], label: usize) -> Detection {
    Detection {
        bbox,
        label,
        score: 0.9,
        level: 3,
        centerness: 1.0,
    }
}

fn small_config(classes: usize) -> MaskConfig {
    MaskConfig {
        channels: 8,
        maskiou_fc: 16,
        ..MaskConfig::new(classes, true)
    }
}

struct Setup {
    store: ParamStore<f32>,
    branch: MaskBranch,
    rois: Vec<Roi>,
    levels: Vec<(u32, Tensor<f32>)>,
}

fn setup(classes: usize, seed: u64) -> Setup {
    let cfg = small_config(classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let branch = MaskBranch::new(&mut store, 6, &cfg, &mut rng).unwrap();
    let levels = (3..=5u32)
        .map(|k| {
            let n = 64 >> k;
            (k, Tensor::from_fn(vec![1, 6, n, n], |_| rng.random_range(-1.0..1.0)))
        })
        .collect();
    let rois = [
        ([2.0, 3.0, 20.0, 30.0], 0),
        ([0.0, 0.0, 64.0, 64.0], classes - 1),
        ([30.0, 30.0, 41.0, 37.0], 0),
    ]
    .iter()
    .map(|&(b, l)| {
        Roi::from_detection(&det(b, l), 0, 64, 64, &cfg.assign)
            .unwrap()
            .unwrap()
    })
    .collect();
    Setup {
        store,
        branch,
        rois,
        levels,
    }
}

fn run(s: &Setup) -> (Vec<usize>, Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>) {
    let mut tape = Tape::<f32>::new();
    let p = s.store.bind(&mut tape);
    let levels = s.levels.iter().map(|(k, t)| (*k, tape.constant(t.clone()))).collect();
    let pyramid = FeaturePyramid::new(levels);
    let out = s.branch.forward(&mut tape, &p, &pyramid, &s.rois).unwrap();
    (
        tape.shape(out.feats).to_vec(),
        tape.value(out.feats).clone(),
        tape.value(out.logits).clone(),
        out.iou.map(|v| tape.value(v).clone()),
    )
}

#[test]
fn branch_shapes() {
    let s = setup(3, 0);
    let (feat_shape, _, logits, iou) = run(&s);
    assert_eq!(feat_shape, vec![3, 6, 14, 14]);
    assert_eq!(logits.shape(), &[3, 3, 28, 28]);
    assert_eq!(iou.unwrap().shape(), &[3, 3]);
}

#[test]
fn roi_levels_follow_assignment() {
    let s = setup(2, 0);
    assert_eq!(s.rois.iter().map(|r| r.level).collect::<Vec<_>>(), vec![3, 5, 3]);
    let cfg = small_config(2);
    assert!(
        Roi::from_detection(&det([5.0, 5.0, 5.0, 9.0], 0), 0, 64, 64, &cfg.assign)
            .unwrap()
            .is_none()
    );
}

fn zero_named(store: &mut ParamStore<f32>, prefix: &str) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix))
        .map(|(i, _, _)| i)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn zero_predictor_gives_even_odds() {
    let mut s = setup(2, 1);
    zero_named(&mut s.store, "mask.predictor");
    let (_, _, logits, _) = run(&s);
    assert!(logits.data().iter().all(|&z| z == 0.0));
}

#[test]
fn zero_iou_head_estimates_zero() {
    let mut s = setup(2, 2);
    zero_named(&mut s.store, "maskiou.");
    let (_, _, _, iou) = run(&s);
    assert!(iou.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn lite_and_base_head_sizes() {
    for (lite, convs, width) in [(true, 2, 128), (false, 4, 256)] {
        let cfg = MaskConfig::new(3, lite);
        assert_eq!(
            (cfg.conv_count, cfg.channels, cfg.mask_resolution()),
            (convs, width, 28)
        );
        let mut store = ParamStore::new();
        MaskBranch::new(&mut store, 16, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = store
            .iter()
            .filter(|(_, n, _)| n.starts_with("mask.conv") && n.ends_with("weight"))
            .count();
        assert_eq!(n, convs);
    }
}

#[test]
fn branch_rejects_no_rois() {
    let s = setup(2, 0);
    let mut tape = Tape::<f32>::new();
    let p = s.store.bind(&mut tape);
    let levels = s.levels.iter().map(|(k, t)| (*k, tape.constant(t.clone()))).collect();
    assert!(s
        .branch
        .forward(&mut tape, &p, &FeaturePyramid::new(levels), &[])
        .is_err());
}

/// Hand trace of the spatial gate for a 1×C×2×2 input with a zero-padded
/// 3×3 convolution over the [max, mean] channel pair.
#[test]
fn sam_matches_hand_trace() {
    let x = Tensor::new(vec![1, 2, 2, 2], vec![1.0f64, -2.0, 0.5, 3.0, -1.0, 4.0, 2.0, 0.0]).unwrap();
    let kernel: Vec<f64> = (0..18).map(|i| (i as f64 - 8.5) / 10.0).collect();
    let bias = 0.3;
    let mut pooled = [[0.0; 4]; 2];
    for i in 0..4 {
        let (a, b) = (x.data()[i], x.data()[4 + i]);
        pooled[0][i] = a.max(b);
        pooled[1][i] = (a + b) / 2.0;
    }
    let mut want = vec![0.0; 8];
    for y in 0..2i64 {
        for xx in 0..2i64 {
            let mut z = bias;
            for c in 0..2 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (sy, sx) = (y + dy, xx + dx);
                        if (0..2).contains(&sy) && (0..2).contains(&sx) {
                            z += pooled[c][(sy * 2 + sx) as usize] * kernel[c * 9 + ((dy + 1) * 3 + dx + 1) as usize];
                        }
                    }
                }
            }
            let g = 1.0 / (1.0 + (-z).exp());
            let i = (y * 2 + xx) as usize;
            want[i] = g * x.data()[i];
            want[4 + i] = g * x.data()[4 + i];
        }
    }
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let w = tape.constant(Tensor::new(vec![1, 2, 3, 3], kernel).unwrap());
    let b = tape.constant(Tensor::scalar(bias).reshape(vec![1]).unwrap());
    let y = sam_forward(&mut tape, xv, w, b).unwrap();
    for (g, w) in tape.value(y).data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-6);
    }
}

#[test]
fn recalibration() {
    assert_eq!(recalibrate_score(0.7, 1.0).unwrap(), 0.7);
    assert!((recalibrate_score(0.8, 0.5).unwrap() - 0.4).abs() < 1e-7);
    for c in [0.0, 0.3, 0.9, 1.0f32] {
        let mut last = -1.0;
        for i in 0..=100 {
            let v = recalibrate_score(c, i as f32 / 100.0).unwrap();
            assert!(v >= last && v <= c);
            last = v;
        }
    }
    assert!(recalibrate_score(0.5, 1.01).is_err());
}

#[test]
fn paste_saturated_logits() {
    let on = paste_mask(&[20.0; 28 * 28], 28, &[0.0, 0.0, 40.0, 30.0], 30, 40, 0.5).unwrap();
    assert_eq!(on.area(), 1200);
    let off = paste_mask(&[-20.0; 28 * 28], 28, &[0.0, 0.0, 40.0, 30.0], 30, 40, 0.5).unwrap();
    assert_eq!(off.area(), 0);
    let empty = paste_mask(&[20.0; 28 * 28], 28, &[5.0, 5.0, 5.0, 20.0], 30, 40, 0.5).unwrap();
    assert_eq!(empty.area(), 0);
    assert!(paste_mask(&[0.0; 10], 28, &[0.0, 0.0, 4.0, 4.0], 8, 8, 0.5).is_err());
}

#[test]
fn paste_half_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let x1 = rng.random_range(0.0..20.0f32).round();
        let y1 = rng.random_range(0.0..20.0f32).round();
        let w = rng.random_range(6.0..40.0f32).round();
        let h = rng.random_range(6.0..40.0f32).round();
        let logits: Vec<f32> = (0..28 * 28).map(|i| if i % 28 < 14 { 20.0 } else { -20.0 }).collect();
        let m = paste_mask(&logits, 28, &[x1, y1, x1 + w, y1 + h], 64, 64, 0.5).unwrap();
        let half = w * h / 2.0;
        assert!((m.area() as f32 - half).abs() <= h, "{} vs {half}", m.area());
        let tight = m.tight_box().unwrap();
        assert_eq!(tight[0], x1);
    }
}

proptest! {
    #[test]
    fn pasted_mask_stays_inside_its_box(
        x1 in 0.0f32..30.0, y1 in 0.0f32..30.0, w in 0.5f32..30.0, h in 0.5f32..30.0, seed in 0u64..100
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f32> = (0..14 * 14).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b = [x1, y1, (x1 + w).min(48.0), (y1 + h).min(48.0)];
        let m = paste_mask(&logits, 14, &b, 48, 48, 0.5).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                if m.get(y, x) {
                    let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
                    prop_assert!(cx >= b[0] && cx < b[2] && cy >= b[1] && cy < b[3]);
                }
            }
        }
    }

    #[test]
    fn sam_gate_never_amplifies(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(vec![1, 3, 4, 4], |_| rng.random_range(-5.0..5.0f32));
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::from_fn(vec![1, 2, 3, 3], |_| rng.random_range(-1.0..1.0)));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = sam_forward(&mut tape, xv, w, b).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }
}
