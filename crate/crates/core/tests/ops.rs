use centermask::tensor::{bilinear_sample, check_gradients, GradCheckOptions, Objective, ReduceMode, RoiSample};
use centermask::{Result, Scalar, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{naive_conv, roi_oracle};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn close(a: &[f32], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        assert!((x as f64 - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

fn conv(x: Tensor<f32>, w: Tensor<f32>, b: Tensor<f32>, stride: usize, pad: usize) -> Tensor<f32> {
    let mut tape = Tape::<f32>::new();
    let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.conv2d(x, w, b, stride, pad).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_zero_kernel() {
    let y = conv(
        Tensor::full(vec![1, 1, 1, 1], 3.0),
        Tensor::zeros(vec![1, 1, 1, 1]),
        Tensor::zeros(vec![1]),
        1,
        0,
    );
    assert_eq!(y.data(), &[0.0]);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 1, 3, 3]);
    let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let y = conv(x.clone(), k, Tensor::zeros(vec![1]), 1, 1);
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_matches_quadruple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        let x = random(&mut rng, &[2, 2, 5, 5]);
        let w = random(&mut rng, &[3, 2, k, k]);
        let b = random(&mut rng, &[3]);
        let want = naive_conv(&x, &w, b.data(), stride, pad);
        let got = conv(x, w, b, stride, pad);
        close(got.data(), &want, 1e-6);
    }
}

#[test]
fn conv_counts_multiply_accumulates() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros(vec![4, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(vec![4]));
    tape.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(tape.macs(), (2 * 4 * 4 * 4 * 3 * 9) as u64);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(vec![1]));
    assert!(tape.conv2d(x, w, b, 1, 1).is_err());
}

fn deconv(x: Tensor<f32>, w: Tensor<f32>, b: Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::<f32>::new();
    let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.deconv2d_2x2(x, w, b).unwrap();
    tape.value(y).clone()
}

#[test]
fn deconv_spreads_a_pixel() {
    let y = deconv(
        Tensor::full(vec![1, 1, 1, 1], 1.7),
        Tensor::full(vec![1, 1, 2, 2], 1.0),
        Tensor::zeros(vec![1]),
    );
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 1.7));
    let z = deconv(
        Tensor::full(vec![1, 1, 3, 3], 2.0),
        Tensor::zeros(vec![1, 2, 2, 2]),
        Tensor::zeros(vec![2]),
    );
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn deconv_doubles_fourteen_to_twenty_eight() {
    let y = deconv(
        Tensor::zeros(vec![1, 2, 14, 14]),
        Tensor::zeros(vec![2, 3, 2, 2]),
        Tensor::zeros(vec![3]),
    );
    assert_eq!(y.shape(), &[1, 3, 28, 28]);
}

#[test]
fn deconv_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3, 3, 4]);
    let w = random(&mut rng, &[3, 2, 2, 2]);
    let b = random(&mut rng, &[2]);
    let mut want = vec![0.0f64; 2 * 2 * 6 * 8];
    for n in 0..2 {
        for o in 0..2 {
            for i in 0..6 {
                for j in 0..8 {
                    let mut s = b.data()[o] as f64;
                    for c in 0..3 {
                        let xv = x.data()[((n * 3 + c) * 3 + i / 2) * 4 + j / 2] as f64;
                        s += xv * w.data()[((c * 2 + o) * 2 + i % 2) * 2 + j % 2] as f64;
                    }
                    want[((n * 2 + o) * 6 + i) * 8 + j] = s;
                }
            }
        }
    }
    close(deconv(x, w, b).data(), &want, 1e-6);
}

fn reduce(x: Tensor<f32>, mode: ReduceMode) -> Tensor<f32> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(x);
    let y = tape.reduce_channel(x, mode).unwrap();
    tape.value(y).clone()
}

#[test]
fn channel_reduction() {
    let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
    assert_eq!(reduce(x.clone(), ReduceMode::Max).data(), &[3.0]);
    assert_eq!(reduce(x, ReduceMode::Avg).data(), &[2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let single = random(&mut rng, &[2, 1, 3, 3]);
    for mode in [ReduceMode::Max, ReduceMode::Avg] {
        assert_eq!(reduce(single.clone(), mode).data(), single.data());
        let c = reduce(Tensor::full(vec![1, 4, 2, 2], 0.625), mode);
        assert!(c.data().iter().all(|&v| v == 0.625));
    }
}

fn gap(x: Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(x);
    let y = tape.global_avg_pool(x).unwrap();
    tape.value(y).clone()
}

#[test]
fn global_average_pool() {
    assert_eq!(
        gap(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).data(),
        &[2.5]
    );
    let c = gap(Tensor::full(vec![2, 3, 4, 5], -1.25));
    assert_eq!(c.shape(), &[2, 3, 1, 1]);
    assert!(c.data().iter().all(|&v| v == -1.25));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 3, 4, 4]);
    let scaled = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 3.0).collect()).unwrap();
    for (a, b) in gap(scaled).data().iter().zip(gap(x).data()) {
        assert!((a - 3.0 * b).abs() < 1e-6);
    }
}

fn fc(x: Tensor<f32>, w: Tensor<f32>, b: Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::<f32>::new();
    let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.fully_connected(x, w, b).unwrap();
    tape.value(y).clone()
}

#[test]
fn fully_connected_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[2, 4]);
    let eye = Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    assert_eq!(fc(x.clone(), eye, Tensor::zeros(vec![4])).data(), x.data());
    let b = random(&mut rng, &[3]);
    let y = fc(x, Tensor::zeros(vec![3, 4]), b.clone());
    assert_eq!(&y.data()[..3], b.data());
    assert_eq!(&y.data()[3..], b.data());
}

#[test]
fn fully_connected_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[1, 4]);
    let w = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3]);
    let want: Vec<f64> = (0..3)
        .map(|o| {
            b.data()[o] as f64
                + (0..4)
                    .map(|i| x.data()[i] as f64 * w.data()[o * 4 + i] as f64)
                    .sum::<f64>()
        })
        .collect();
    close(fc(x, w, b).data(), &want, 1e-6);
}

#[test]
fn pointwise_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![4], vec![0.0, 1.0, -5.0, 5.0]).unwrap());
    let s = tape.sigmoid(x).unwrap();
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(s).data()[0], 0.5);
    assert!((tape.value(s).data()[1] - 0.73106).abs() < 1e-5);
    assert_eq!(&tape.value(r).data()[2..], &[0.0, 5.0]);
}

#[test]
fn concat_widths_and_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&mut rng, &[2, 2, 3, 3]);
    let b = random(&mut rng, &[2, 3, 3, 3]);
    let mut tape = Tape::<f32>::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.concat_channels(&[va, vb]).unwrap();
    let single = tape.concat_channels(&[va]).unwrap();
    assert_eq!(tape.value(single).data(), a.data());
    let out = tape.value(y);
    assert_eq!(out.shape(), &[2, 5, 3, 3]);
    for n in 0..2 {
        let blk = &out.data()[n * 45..(n + 1) * 45];
        assert_eq!(&blk[..18], &a.data()[n * 18..(n + 1) * 18]);
        assert_eq!(&blk[18..], &b.data()[n * 27..(n + 1) * 27]);
    }
}

#[test]
fn bilinear_sampling() {
    let m = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(bilinear_sample(&m, 0.5, 0.5).unwrap(), vec![2.5]);
    assert_eq!(bilinear_sample(&m, 1.0, 0.0).unwrap(), vec![2.0]);
    assert_eq!(bilinear_sample(&m, 0.0, 1.0).unwrap(), vec![3.0]);
    let c = Tensor::full(vec![1, 2, 3, 3], 0.75f64);
    for (x, y) in [(0.2, 1.7), (1.9, 0.1), (2.0, 2.0)] {
        assert!(bilinear_sample(&c, x, y)
            .unwrap()
            .iter()
            .all(|v| (v - 0.75).abs() < 1e-12));
    }
}

fn pool(map: &Tensor<f32>, bbox: [f64; 4], out: usize, s: usize) -> Tensor<f32> {
    let [_, _, h, w] = map.dims4().unwrap();
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(map.clone());
    let y = tape
        .roi_align(&[v], vec![RoiSample::plan(0, 0, h, w, bbox, out, s)], out)
        .unwrap();
    tape.value(y).clone()
}

#[test]
fn roi_align_matches_bilinear_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let map = random(&mut rng, &[1, 3, 9, 11]);
        let x1 = rng.random_range(-1.0..8.0);
        let y1 = rng.random_range(-1.0..6.0);
        let bbox = [x1, y1, x1 + rng.random_range(0.2..6.0), y1 + rng.random_range(0.2..5.0)];
        let s = rng.random_range(1..4);
        let got = pool(&map, bbox, 14, s);
        assert_eq!(got.shape(), &[1, 3, 14, 14]);
        close(got.data(), &roi_oracle(&map, bbox, 14, s), 1e-6);
    }
}

#[test]
fn roi_align_simple_cases() {
    let m = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(pool(&m, [0.0, 0.0, 1.0, 1.0], 1, 1).data(), &[2.5]);
    let c = Tensor::full(vec![1, 2, 5, 5], 1.5);
    assert!(pool(&c, [0.3, 0.9, 3.7, 4.1], 14, 2)
        .data()
        .iter()
        .all(|&v| (v - 1.5).abs() < 1e-6));
}

proptest! {
    #[test]
    fn roi_align_is_linear_in_the_map(seed in 0u64..1000, a in -2.0f32..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random(&mut rng, &[1, 2, 6, 6]);
        let scaled = Tensor::new(map.shape().to_vec(), map.data().iter().map(|v| v * a).collect()).unwrap();
        let bbox = [0.5, 0.25, 4.5, 3.0];
        let y1 = pool(&map, bbox, 4, 2);
        let y2 = pool(&scaled, bbox, 4, 2);
        for (p, q) in y1.data().iter().zip(y2.data()) {
            prop_assert!((p * a - q).abs() < 1e-5);
        }
    }

    #[test]
    fn concat_then_slice_round_trips(c1 in 1usize..4, c2 in 1usize..4, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[1, c1, 2, 3]);
        let b = random(&mut rng, &[1, c2, 2, 3]);
        let mut tape = Tape::<f32>::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.concat_channels(&[va, vb]).unwrap();
        let d = tape.value(y).data();
        prop_assert_eq!(&d[..c1 * 6], a.data());
        prop_assert_eq!(&d[c1 * 6..], b.data());
    }
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut tape = Tape::<f32>::new();
    let w = tape.param(Tensor::full(vec![3], 0.3));
    let z = tape.scale(w, 0.0).unwrap();
    let l = tape.sum(z).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(w).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::scalar(0.0));
    let s = tape.sigmoid(w).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[0.25]);
}

struct ConvReluSum;

impl Objective for ConvReluSum {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var]) -> Result<Var> {
        let h = tape.conv2d(p[0], p[1], p[2], 1, 1)?;
        let h = tape.relu(h)?;
        let y = tape.conv2d(h, p[3], p[4], 1, 1)?;
        let y = tape.relu(y)?;
        tape.sum(y)
    }
}

#[test]
fn two_layer_network_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = vec![
        random(&mut rng, &[1, 2, 5, 5]),
        random(&mut rng, &[3, 2, 3, 3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[2, 3, 3, 3]),
        random(&mut rng, &[2]),
    ];
    let report = check_gradients(
        &ConvReluSum,
        &params,
        &GradCheckOptions {
            step: 1e-5,
            ..Default::default()
        },
    )
    .unwrap();
    for t in &report.tensors {
        assert!(t.rel_error < 1e-3, "tensor {} error {}", t.index, t.rel_error);
    }
}

#[test]
fn backward_needs_a_scalar() {
    let mut tape = Tape::<f32>::new();
    let w = tape.param(Tensor::zeros(vec![2]));
    assert!(tape.backward(w).is_err());
}
