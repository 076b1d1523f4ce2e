//! Forward and adjoint kernels on raw row-major buffers.
//!
//! The tape owns shape validation and bookkeeping; these functions assume
//! their geometry structs were built from validated shapes.

use super::{gemm, Scalar};
use crate::error::{shape_err, Result};

/// Geometry of a 2-D convolution over an N×C×H×W input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = x;
        let [co, ci, kh, kw] = match weight {
            &[a, b, c, d] => [a, b, c, d],
            _ => return Err(shape_err("conv2d", format!("weight rank {:?}", weight))),
        };
        if ci != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels, weight expects {ci}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err("conv2d", format!("even kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.co * self.patch() * self.out_plane()) as u64
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.out_plane();
    let (h, w) = (g.h as isize, g.w as isize);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.out_plane();
    let (h, w) = (g.h as isize, g.w as isize);
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (p, k) = (g.out_plane(), g.patch());
    let mut out = vec![T::zero(); g.n * g.co * p];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let on = &mut out[n * g.co * p..(n + 1) * g.co * p];
        for (o, chunk) in on.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[o]);
        }
        let cols: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        gemm(g.co, k, p, T::one(), w, (k, 1), cols, (p, 1), T::one(), on, (p, 1));
    }
    out
}

/// Accumulates the adjoint of [`conv2d_forward`] into whichever buffers are given.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (p, k) = (g.out_plane(), g.patch());
    let mut col = vec![T::zero(); k * p];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.co * p..(n + 1) * g.co * p];
        if let Some(db) = db.as_deref_mut() {
            for (o, chunk) in dyn_.chunks(p).enumerate() {
                db[o] = db[o] + chunk.iter().copied().sum();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            let cols: &[T] = if g.pointwise() {
                xn
            } else {
                im2col(g, xn, &mut col);
                &col
            };
            // dW (co×k) += dY (co×p) · colᵀ (p×k)
            gemm(g.co, p, k, T::one(), dyn_, (p, 1), cols, (1, p), T::one(), dw, (k, 1));
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            if g.pointwise() {
                gemm(g.c, g.co, p, T::one(), w, (1, k), dyn_, (p, 1), T::one(), dxn, (p, 1));
            } else {
                // dcol (k×p) = Wᵀ (k×co) · dY (co×p)
                gemm(
                    g.c * g.kh * g.kw,
                    g.co,
                    p,
                    T::one(),
                    w,
                    (1, k),
                    dyn_,
                    (p, 1),
                    T::zero(),
                    &mut col,
                    (p, 1),
                );
                col2im(g, &col, dxn);
            }
        }
    }
}

/// Geometry of a 2×2, stride-2 transposed convolution; weight is C×C'×2×2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
}

impl DeconvGeom {
    pub fn new(x: [usize; 4], weight: &[usize]) -> Result<Self> {
        let [n, c, h, w] = x;
        match *weight {
            [ci, co, 2, 2] if ci == c => Ok(DeconvGeom { n, c, h, w, co }),
            _ => Err(shape_err(
                "deconv2d_2x2",
                format!("input channels {c}, weight {weight:?} (expected {c}xC'x2x2)"),
            )),
        }
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.c * self.co * 4 * self.h * self.w) as u64
    }
}

pub fn deconv2x2_forward<T: Scalar>(g: &DeconvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (p, q) = (g.h * g.w, g.co * 4);
    let (ho, wo) = (2 * g.h, 2 * g.w);
    let mut out = vec![T::zero(); g.n * g.co * ho * wo];
    let mut tmp = vec![T::zero(); q * p];
    for n in 0..g.n {
        let xn = &x[n * g.c * p..(n + 1) * g.c * p];
        // tmp (co·4 × p) = Wᵀ (co·4 × c) · X (c × p)
        gemm(q, g.c, p, T::one(), w, (1, q), xn, (p, 1), T::zero(), &mut tmp, (p, 1));
        let on = &mut out[n * g.co * ho * wo..(n + 1) * g.co * ho * wo];
        for o in 0..g.co {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &tmp[((o * 2 + a) * 2 + bb) * p..][..p];
                    for i in 0..g.h {
                        for j in 0..g.w {
                            on[(o * ho + 2 * i + a) * wo + 2 * j + bb] = row[i * g.w + j] + b[o];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn deconv2x2_backward<T: Scalar>(
    g: &DeconvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (p, q) = (g.h * g.w, g.co * 4);
    let (ho, wo) = (2 * g.h, 2 * g.w);
    let mut tmp = vec![T::zero(); q * p];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.co * ho * wo..(n + 1) * g.co * ho * wo];
        for o in 0..g.co {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &mut tmp[((o * 2 + a) * 2 + bb) * p..][..p];
                    for i in 0..g.h {
                        for j in 0..g.w {
                            row[i * g.w + j] = dyn_[(o * ho + 2 * i + a) * wo + 2 * j + bb];
                        }
                    }
                }
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for o in 0..g.co {
                let s: T = tmp[o * 4 * p..(o + 1) * 4 * p].iter().copied().sum();
                db[o] = db[o] + s;
            }
        }
        let xn = &x[n * g.c * p..(n + 1) * g.c * p];
        if let Some(dw) = dw.as_deref_mut() {
            // dW (c × co·4) += X (c×p) · tmpᵀ (p × co·4)
            gemm(g.c, p, q, T::one(), xn, (p, 1), &tmp, (1, p), T::one(), dw, (q, 1));
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.c * p..(n + 1) * g.c * p];
            gemm(g.c, q, p, T::one(), w, (q, 1), &tmp, (p, 1), T::one(), dxn, (p, 1));
        }
    }
}

/// Geometry of a square max pooling window with -inf padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(x: [usize; 4], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = x;
        if k == 0 || stride == 0 || pad >= k || h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(
                "max_pool",
                format!("window {k} stride {stride} pad {pad} on {h}x{w}"),
            ));
        }
        Ok(PoolGeom {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }
}

/// Returns pooled values and, per output, the flat input index of the winner
/// (first in scan order on ties).
pub fn max_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<u32>) {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(planes * g.ho * g.wo);
    for pl in 0..planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * g.w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceMode {
    Max,
    Avg,
}

/// Channel-axis reduction to N×1×H×W; `argmax` holds the winning channel
/// (lowest index on ties) for max mode.
pub fn reduce_channel_forward<T: Scalar>(dims: [usize; 4], x: &[T], mode: ReduceMode) -> (Vec<T>, Vec<u32>) {
    let [n, c, h, w] = dims;
    let p = h * w;
    let mut out = vec![T::zero(); n * p];
    let mut arg = Vec::new();
    match mode {
        ReduceMode::Avg => {
            let inv = T::one() / T::of(c as f64);
            for b in 0..n {
                for ch in 0..c {
                    let src = &x[(b * c + ch) * p..][..p];
                    for (o, &v) in out[b * p..(b + 1) * p].iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
                out[b * p..(b + 1) * p].iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        ReduceMode::Max => {
            arg = vec![0u32; n * p];
            for b in 0..n {
                out[b * p..(b + 1) * p].copy_from_slice(&x[b * c * p..][..p]);
                for ch in 1..c {
                    let src = &x[(b * c + ch) * p..][..p];
                    for i in 0..p {
                        if src[i] > out[b * p + i] {
                            out[b * p + i] = src[i];
                            arg[b * p + i] = ch as u32;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

/// The four bilinear taps `(flat index, weight)` for a continuous point on an
/// H×W grid; coordinates outside `[0, W-1] × [0, H-1]` are clamped to the border.
pub fn bilinear_taps(h: usize, w: usize, px: f64, py: f64) -> [(usize, f64); 4] {
    let px = px.clamp(0.0, (w - 1) as f64);
    let py = py.clamp(0.0, (h - 1) as f64);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// Bilinear interpolation of every channel of a 1×C×H×W map at `(px, py)`.
pub fn bilinear_sample<T: Scalar>(x: &super::Tensor<T>, px: f64, py: f64) -> Result<Vec<T>> {
    let [n, c, h, w] = x.dims4()?;
    if n != 1 || h == 0 || w == 0 {
        return Err(shape_err("bilinear_sample", format!("{:?}", x.shape())));
    }
    let taps = bilinear_taps(h, w, px, py);
    Ok((0..c)
        .map(|ch| {
            let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
            taps.iter()
                .map(|&(i, wt)| plane[i] * T::of(wt))
                .fold(T::zero(), |a, b| a + b)
        })
        .collect())
}

/// One RoI prepared for pooling: source level, image, and a per-bin list of
/// `(flat plane index, weight)` taps with the bin average folded in.
#[derive(Clone, Debug)]
pub struct RoiSample {
    pub level: usize,
    pub batch: usize,
    pub bins: Vec<Vec<(u32, f64)>>,
}

impl RoiSample {
    /// Plans an aligned RoI pool of a box given in feature-map coordinates
    /// (already divided by the level stride; pixel centers sit at integers).
    #[allow(clippy::too_many_arguments)]
    pub fn plan(
        level: usize,
        batch: usize,
        feat_h: usize,
        feat_w: usize,
        [x1, y1, x2, y2]: [f64; 4],
        out: usize,
        sampling: usize,
    ) -> Self {
        let bin_w = (x2 - x1) / out as f64;
        let bin_h = (y2 - y1) / out as f64;
        let norm = 1.0 / (sampling * sampling) as f64;
        let mut bins = Vec::with_capacity(out * out);
        for i in 0..out {
            for j in 0..out {
                let mut taps: Vec<(u32, f64)> = Vec::with_capacity(4 * sampling * sampling);
                for sy in 0..sampling {
                    let py = y1 + i as f64 * bin_h + (sy as f64 + 0.5) * bin_h / sampling as f64;
                    for sx in 0..sampling {
                        let px = x1 + j as f64 * bin_w + (sx as f64 + 0.5) * bin_w / sampling as f64;
                        for (idx, wt) in bilinear_taps(feat_h, feat_w, px, py) {
                            if wt != 0.0 {
                                taps.push((idx as u32, wt * norm));
                            }
                        }
                    }
                }
                bins.push(taps);
            }
        }
        RoiSample { level, batch, bins }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
