#![allow(dead_code)]

use centermask::boxes::{area, BBox};
use centermask::fcos::Detection;
use centermask::train::DEFAULT_RANGES;
use centermask::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: &[f32], stride: usize, pad: usize) -> Vec<f64> {
    let [n, ci, h, wd] = x.dims4().unwrap();
    let [co, _, k, _] = w.dims4().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let at = |bn: usize, c: usize, y: i64, xx: i64| -> f64 {
        if y < 0 || xx < 0 || y >= h as i64 || xx >= wd as i64 {
            0.0
        } else {
            x.data()[((bn * ci + c) * h + y as usize) * wd + xx as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(n * co * ho * wo);
    for bn in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = b[o] as f64;
                    for c in 0..ci {
                        for di in 0..k {
                            for dj in 0..k {
                                let y = (i * stride + di) as i64 - pad as i64;
                                let xx = (j * stride + dj) as i64 - pad as i64;
                                s += at(bn, c, y, xx) * w.data()[((o * ci + c) * k + di) * k + dj] as f64;
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

/// Direct bilinear oracle of one aligned RoI bin grid.
pub fn roi_oracle(map: &Tensor<f32>, bbox: [f64; 4], out: usize, s: usize) -> Vec<f64> {
    let [_, c, h, w] = map.dims4().unwrap();
    let [x1, y1, x2, y2] = bbox;
    let (bw, bh) = ((x2 - x1) / out as f64, (y2 - y1) / out as f64);
    let mut res = vec![0.0; c * out * out];
    for ch in 0..c {
        let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
        let at = |y: usize, x: usize| plane[y * w + x] as f64;
        for i in 0..out {
            for j in 0..out {
                let mut acc = 0.0;
                for sy in 0..s {
                    for sx in 0..s {
                        let py = (y1 + (i as f64 + (sy as f64 + 0.5) / s as f64) * bh).clamp(0.0, (h - 1) as f64);
                        let px = (x1 + (j as f64 + (sx as f64 + 0.5) / s as f64) * bw).clamp(0.0, (w - 1) as f64);
                        let (y0, x0) = (py.floor() as usize, px.floor() as usize);
                        let (yb, xb) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (fy, fx) = (py - y0 as f64, px - x0 as f64);
                        acc += at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                            + at(y0, xb) * (1.0 - fy) * fx
                            + at(yb, x0) * fy * (1.0 - fx)
                            + at(yb, xb) * fy * fx;
                    }
                }
                res[(ch * out + i) * out + j] = acc / (s * s) as f64;
            }
        }
    }
    res
}

/// Textbook formulation: walk by descending score and suppress every later
/// overlapping box of the same class.
pub fn nms_oracle(dets: &[Detection], thr: f32, budget: usize) -> Vec<Detection> {
    let n = dets.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut dead = vec![false; n];
    let mut out = Vec::new();
    for (pos, &i) in idx.iter().enumerate() {
        if dead[i] {
            continue;
        }
        out.push(dets[i].clone());
        for &j in &idx[pos + 1..] {
            let (a, b) = (&dets[i].bbox, &dets[j].bbox);
            let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
            let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
            let inter = iw * ih;
            let union = area(a) + area(b) - inter;
            let o = if union <= 0.0 { 0.0 } else { inter / union };
            if dets[j].label == dets[i].label && o > thr {
                dead[j] = true;
            }
        }
    }
    out.truncate(budget);
    out
}

pub fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..80.0f32), rng.random_range(0.0..80.0f32));
            let (w, h) = (rng.random_range(1.0..40.0f32), rng.random_range(1.0..40.0f32));
            Detection {
                bbox: [x, y, x + w, y + h],
                label: rng.random_range(0..3),
                // Coarse scores force ties.
                score: (rng.random_range(1..40) as f32) / 40.0,
                level: 3,
                centerness: 1.0,
            }
        })
        .collect()
}

pub fn pyramid_sizes(side: usize) -> Vec<(u32, usize, usize)> {
    (3..=7u32)
        .map(|k| {
            let n = side.div_ceil(1 << k);
            (k, n, n)
        })
        .collect()
}

/// Paints larger boxes first so smaller ones overwrite them; equal areas
/// are painted in reverse index order so the earlier box lands last.
pub fn targets_oracle(gt: &[(BBox, usize)], k: u32, n: usize) -> Vec<(i32, [f32; 4])> {
    let (lo, hi) = DEFAULT_RANGES[k as usize - 3];
    let mut order: Vec<usize> = (0..gt.len()).collect();
    order.sort_by(|&a, &b| area(&gt[b].0).partial_cmp(&area(&gt[a].0)).unwrap().then(b.cmp(&a)));
    let s = (1u32 << k) as f32;
    let mut out = vec![(-1, [0.0; 4]); n * n];
    for &j in &order {
        let b = gt[j].0;
        for i in 0..n {
            for jj in 0..n {
                let (x, y) = (s / 2.0 + jj as f32 * s, s / 2.0 + i as f32 * s);
                let (l, t, r, bb) = (x - b[0], y - b[1], b[2] - x, b[3] - y);
                let m = l.max(t).max(r).max(bb);
                if l > 0.0 && t > 0.0 && r > 0.0 && bb > 0.0 && m > lo && m <= hi {
                    out[i * n + jj] = (gt[j].1 as i32, [l, t, r, bb]);
                }
            }
        }
    }
    out
}

pub fn random_scene(rng: &mut ChaCha8Rng, side: f32, count: usize) -> Vec<(BBox, usize)> {
    (0..count)
        .map(|_| {
            let (x1, y1) = (rng.random_range(0.0..side * 0.8), rng.random_range(0.0..side * 0.8));
            let x2 = rng.random_range(x1 + 1.0..=side);
            let y2 = rng.random_range(y1 + 1.0..=side);
            // Integer corners make equal areas and on-edge locations common.
            (
                [
                    x1.round(),
                    y1.round(),
                    x2.round().max(x1.round() + 1.0),
                    y2.round().max(y1.round() + 1.0),
                ],
                rng.random_range(0..3),
            )
        })
        .collect()
}

pub fn naive_fc(x: &Tensor<f32>, w: &Tensor<f32>, b: &[f32]) -> Vec<f64> {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut out = Vec::with_capacity(n * o);
    for r in 0..n {
        for c in 0..o {
            let dot: f64 = (0..i)
                .map(|k| x.data()[r * i + k] as f64 * w.data()[c * i + k] as f64)
                .sum();
            out.push(b[c] as f64 + dot);
        }
    }
    out
}
