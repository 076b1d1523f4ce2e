//! Reverse-mode differentiation by operation recording.
//!
//! Every forward operator appends a node holding its output value and what
//! its adjoint needs. `backward` walks the nodes in reverse and accumulates
//! into the gradient buffers of leaf parameters; intermediate adjoints are
//! scratch and are dropped after each pass, so repeated passes add up.

use super::kernels::{self, ConvGeom, DeconvGeom, PoolGeom, ReduceMode, RoiSample};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Constant,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Deconv {
        x: Var,
        w: Var,
        b: Var,
        geom: DeconvGeom,
    },
    ReduceChannel {
        x: Var,
        dims: [usize; 4],
        mode: ReduceMode,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: Var,
        dims: [usize; 4],
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        c: usize,
        co: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    ScaleConst {
        x: Var,
        c: T,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Concat {
        xs: Vec<Var>,
        n: usize,
        chans: Vec<usize>,
        plane: usize,
    },
    Add(Var, Var),
    ScaleChannels {
        x: Var,
        gate: Var,
        dims: [usize; 4],
    },
    ScaleSpatial {
        x: Var,
        gate: Var,
        dims: [usize; 4],
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2x {
        x: Var,
        dims: [usize; 4],
    },
    RoiAlign {
        levels: Vec<Var>,
        rois: Vec<RoiSample>,
        c: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
        k: usize,
        inner: usize,
    },
    /// Scalar loss whose input adjoint was computed during the forward pass.
    Fused {
        x: Var,
        dx: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-owner record of one forward computation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

type Grads<T> = Vec<Option<Vec<T>>>;

fn slot<T: Scalar>(grads: &mut Grads<T>, v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn take_slot<T: Scalar>(grads: &mut Grads<T>, v: Var, len: usize) -> Vec<T> {
    grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(grads: &mut Grads<T>, v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => grads[v.0] = Some(g.to_vec()),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by conv, deconv and linear ops.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf parameter, if any pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Zeroes every leaf gradient buffer.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        self.value(v)
            .dims4()
            .map_err(|_| shape_err(op, format!("expected N×C×H×W, got {:?}", self.shape(v))))
    }

    fn expect_bias(&self, op: &'static str, b: Var, len: usize) -> Result<()> {
        if self.value(b).numel() != len {
            return Err(shape_err(
                op,
                format!("bias has {} values, expected {len}", self.value(b).numel()),
            ));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.dims4("conv2d", x)?, self.shape(w), stride, pad)?;
        self.expect_bias("conv2d", b, geom.co)?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        self.macs += geom.macs();
        let t = Tensor::new(vec![geom.n, geom.co, geom.ho, geom.wo], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// 2×2 transposed convolution with stride 2; weight is C×C'×2×2.
    pub fn deconv2d_2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let geom = DeconvGeom::new(self.dims4("deconv2d_2x2", x)?, self.shape(w))?;
        self.expect_bias("deconv2d_2x2", b, geom.co)?;
        let out = kernels::deconv2x2_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        self.macs += geom.macs();
        let t = Tensor::new(vec![geom.n, geom.co, 2 * geom.h, 2 * geom.w], out)?;
        self.push("deconv2d_2x2", t, Op::Deconv { x, w, b, geom }, &[x, w, b])
    }

    pub fn reduce_channel(&mut self, x: Var, mode: ReduceMode) -> Result<Var> {
        let dims = self.dims4("reduce_channel", x)?;
        if dims[1] == 0 {
            return Err(shape_err("reduce_channel", "zero channels"));
        }
        let (out, argmax) = kernels::reduce_channel_forward(dims, self.value(x).data(), mode);
        let t = Tensor::new(vec![dims[0], 1, dims[2], dims[3]], out)?;
        self.push("reduce_channel", t, Op::ReduceChannel { x, dims, mode, argmax }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims4("global_avg_pool", x)?;
        let [n, c, h, w] = dims;
        if h == 0 || w == 0 {
            return Err(shape_err("global_avg_pool", "empty spatial extent"));
        }
        let inv = T::one() / T::of((h * w) as f64);
        let data = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|i| data[i * h * w..(i + 1) * h * w].iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(vec![n, c, 1, 1], out)?;
        self.push("global_avg_pool", t, Op::GlobalAvgPool { x, dims }, &[x])
    }

    /// Affine map `y = x·wᵀ + b` for x of shape N×C and w of shape C'×C.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c) = match *self.shape(x) {
            [n, c] => (n, c),
            ref s => return Err(shape_err("fully_connected", format!("input {s:?} is not N×C"))),
        };
        let co = match *self.shape(w) {
            [co, ci] if ci == c => co,
            ref s => {
                return Err(shape_err(
                    "fully_connected",
                    format!("weight {s:?} does not accept {c} inputs"),
                ))
            }
        };
        self.expect_bias("fully_connected", b, co)?;
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        kernels_linear(n, c, co, self.value(x).data(), self.value(w).data(), &mut out);
        self.macs += (n * c * co) as u64;
        let t = Tensor::new(vec![n, co], out)?;
        self.push("fully_connected", t, Op::Linear { x, w, b, n, c, co }, &[x, w, b])
    }

    fn map(&mut self, name: &str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push(name, t, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, |v| v.exp(), Op::Exp(x))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.map("scale", x, |v| v * c, Op::ScaleConst { x, c })
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("mul_scalar", format!("{:?} is not a scalar", self.shape(s))));
        }
        let k = self.value(s).data()[0];
        let src = self.value(x);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * k).collect())?;
        self.push("mul_scalar", t, Op::MulScalar { x, s }, &[x, s])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
        let [n, _, h, w] = self.dims4("concat_channels", first)?;
        let mut chans = Vec::with_capacity(xs.len());
        for &v in xs {
            let [vn, vc, vh, vw] = self.dims4("concat_channels", v)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(first), self.shape(v)),
                ));
            }
            chans.push(vc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&v, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let t = Tensor::new(vec![n, total, h, w], out)?;
        self.push(
            "concat_channels",
            t,
            Op::Concat {
                xs: xs.to_vec(),
                n,
                chans,
                plane,
            },
            xs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Multiplies each N×C channel plane of `x` by the matching entry of `gate`
    /// (N×C or N×C×1×1).
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let dims = self.dims4("scale_channels", x)?;
        let [n, c, h, w] = dims;
        let gs = self.shape(gate);
        if !(gs == [n, c] || gs == [n, c, 1, 1]) {
            return Err(shape_err("scale_channels", format!("gate {gs:?} for input {dims:?}")));
        }
        let g = self.value(gate).data();
        let p = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(p)
            .zip(g)
            .flat_map(|(plane, &k)| plane.iter().map(move |&v| v * k))
            .collect();
        let t = Tensor::new(dims.to_vec(), data)?;
        self.push("scale_channels", t, Op::ScaleChannels { x, gate, dims }, &[x, gate])
    }

    /// Multiplies every channel of `x` by the N×1×H×W map `gate`.
    pub fn scale_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let dims = self.dims4("scale_spatial", x)?;
        let [n, c, h, w] = dims;
        if self.shape(gate) != [n, 1, h, w] {
            return Err(shape_err(
                "scale_spatial",
                format!("gate {:?} for input {dims:?}", self.shape(gate)),
            ));
        }
        let p = h * w;
        let (xs, gs) = (self.value(x).data(), self.value(gate).data());
        let mut data = Vec::with_capacity(xs.len());
        for b in 0..n {
            let gp = &gs[b * p..(b + 1) * p];
            for ch in 0..c {
                let plane = &xs[(b * c + ch) * p..][..p];
                data.extend(plane.iter().zip(gp).map(|(&v, &k)| v * k));
            }
        }
        let t = Tensor::new(dims.to_vec(), data)?;
        self.push("scale_spatial", t, Op::ScaleSpatial { x, gate, dims }, &[x, gate])
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.dims4("max_pool", x)?, k, stride, pad)?;
        let (out, argmax) = kernels::max_pool_forward(&geom, self.value(x).data());
        let t = Tensor::new(vec![geom.n, geom.c, geom.ho, geom.wo], out)?;
        self.push("max_pool", t, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims4("upsample_nearest2x", x)?;
        let [n, c, h, w] = dims;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * 4);
        for plane in src.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for xx in 0..2 * w {
                    out.push(row[xx / 2]);
                }
            }
        }
        let t = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        self.push("upsample_nearest2x", t, Op::Upsample2x { x, dims }, &[x])
    }

    /// Pools each planned RoI from `levels[roi.level]` into an R×C×out×out tensor.
    pub fn roi_align(&mut self, levels: &[Var], rois: Vec<RoiSample>, out: usize) -> Result<Var> {
        let first = *levels.first().ok_or_else(|| shape_err("roi_align", "no levels"))?;
        let c = self.dims4("roi_align", first)?[1];
        for &lv in levels {
            if self.dims4("roi_align", lv)?[1] != c {
                return Err(shape_err("roi_align", "levels disagree on channel count"));
            }
        }
        let bins = out * out;
        let mut data = Vec::with_capacity(rois.len() * c * bins);
        for roi in &rois {
            let lv = *levels
                .get(roi.level)
                .ok_or_else(|| shape_err("roi_align", format!("level slot {} missing", roi.level)))?;
            let [n, _, h, w] = self.dims4("roi_align", lv)?;
            if roi.batch >= n || roi.bins.len() != bins {
                return Err(shape_err("roi_align", "roi does not fit its level"));
            }
            let src = self.value(lv).data();
            for ch in 0..c {
                let plane = &src[(roi.batch * c + ch) * h * w..][..h * w];
                for taps in &roi.bins {
                    let v = taps
                        .iter()
                        .fold(T::zero(), |a, &(i, wt)| a + plane[i as usize] * T::of(wt));
                    data.push(v);
                }
            }
        }
        let t = Tensor::new(vec![rois.len(), c, out, out], data)?;
        self.push(
            "roi_align",
            t,
            Op::RoiAlign {
                levels: levels.to_vec(),
                rois,
                c,
            },
            levels,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Picks channel `idx[r]` of row `r` along axis 1: [R, K, ...] -> [R, 1, ...].
    pub fn gather_channel(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[0] != idx.len() {
            return Err(shape_err(
                "gather_channel",
                format!("{shape:?} with {} indices", idx.len()),
            ));
        }
        let k = shape[1];
        let inner: usize = shape[2..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(shape_err("gather_channel", format!("index {bad} out of {k}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for (r, &i) in idx.iter().enumerate() {
            out.extend_from_slice(&src[(r * k + i) * inner..][..inner]);
        }
        let mut oshape = shape.clone();
        oshape[1] = 1;
        let t = Tensor::new(oshape, out)?;
        self.push(
            "gather_channel",
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
                k,
                inner,
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    fn fused(&mut self, name: &str, x: Var, loss: f64, dx: Vec<T>) -> Result<Var> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.push(name, Tensor::scalar(T::of(loss)), Op::Fused { x, dx }, &[x])
    }

    /// Sigmoid focal loss over an N×K×H×W logit map, divided by `norm`.
    ///
    /// `targets` holds one entry per N×H×W location: the positive class, or a
    /// negative number for background. `alpha = None` disables the class
    /// balance weight.
    pub fn sigmoid_focal_loss(
        &mut self,
        x: Var,
        targets: &[i32],
        alpha: Option<f64>,
        gamma: f64,
        norm: f64,
    ) -> Result<Var> {
        let [n, k, h, w] = self.dims4("sigmoid_focal_loss", x)?;
        if targets.len() != n * h * w {
            return Err(shape_err(
                "sigmoid_focal_loss",
                format!("{} targets for {} locations", targets.len(), n * h * w),
            ));
        }
        let p = h * w;
        let src = self.value(x).data();
        let mut dx = vec![T::zero(); src.len()];
        let mut total = 0.0;
        for b in 0..n {
            for cls in 0..k {
                for i in 0..p {
                    let at = (b * k + cls) * p + i;
                    let z = src[at].as_f64();
                    let pos = targets[b * p + i] == cls as i32;
                    let (l, g) = focal_term(z, pos, alpha, gamma);
                    total += l;
                    dx[at] = T::of(g / norm);
                }
            }
        }
        self.fused("sigmoid_focal_loss", x, total / norm, dx)
    }

    /// Weighted binary cross-entropy on logits, `Σ wᵢ·bce(zᵢ, tᵢ) / norm`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64], weights: Option<&[f64]>, norm: f64) -> Result<Var> {
        let src = self.value(x).data();
        if targets.len() != src.len() || weights.is_some_and(|w| w.len() != src.len()) {
            return Err(shape_err("bce_with_logits", "target/weight length mismatch"));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Invalid(format!("bce target {t} outside [0, 1]")));
        }
        let mut dx = vec![T::zero(); src.len()];
        let mut total = 0.0;
        for (i, (&zv, &t)) in src.iter().zip(targets).enumerate() {
            let wt = weights.map_or(1.0, |w| w[i]);
            if wt == 0.0 {
                continue;
            }
            let z = zv.as_f64();
            total += wt * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
            dx[i] = T::of(wt * (sigmoid64(z) - t) / norm);
        }
        self.fused("bce_with_logits", x, total / norm, dx)
    }

    /// `-ln IoU` between predicted and target (l, t, r, b) offset maps sharing
    /// each location, weighted per location and divided by `norm`.
    ///
    /// `x` is N×4×H×W; `targets` uses the same layout and `weights` is N×H×W.
    /// Locations with zero weight are skipped.
    pub fn iou_loss(&mut self, x: Var, targets: &[f64], weights: &[f64], norm: f64) -> Result<Var> {
        let [n, four, h, w] = self.dims4("iou_loss", x)?;
        let p = h * w;
        if four != 4 || targets.len() != n * 4 * p || weights.len() != n * p {
            return Err(shape_err("iou_loss", "expected N×4×H×W offsets with matching targets"));
        }
        let src = self.value(x).data();
        let mut dx = vec![T::zero(); src.len()];
        let mut total = 0.0;
        for b in 0..n {
            for i in 0..p {
                let wt = weights[b * p + i];
                if wt == 0.0 {
                    continue;
                }
                let at = |side: usize| (b * 4 + side) * p + i;
                let pred = [0, 1, 2, 3].map(|s| src[at(s)].as_f64());
                let tgt = [0, 1, 2, 3].map(|s| targets[at(s)]);
                if pred.iter().chain(&tgt).any(|&v| v <= 0.0) {
                    return Err(Error::Invalid("iou_loss needs positive offsets".into()));
                }
                let (l, g) = iou_term(pred, tgt);
                total += wt * l;
                for s in 0..4 {
                    dx[at(s)] = T::of(wt * g[s] / norm);
                }
            }
        }
        self.fused("iou_loss", x, total / norm, dx)
    }

    /// Mean squared error against fixed targets.
    pub fn mse_loss(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let src = self.value(x).data();
        if targets.len() != src.len() || src.is_empty() {
            return Err(shape_err("mse_loss", "target length mismatch"));
        }
        let m = src.len() as f64;
        let mut total = 0.0;
        let dx = src
            .iter()
            .zip(targets)
            .map(|(&v, &t)| {
                let d = v.as_f64() - t;
                total += d * d;
                T::of(2.0 * d / m)
            })
            .collect();
        self.fused("mse_loss", x, total / m, dx)
    }

    /// Accumulates d`loss`/d(leaf) into every reachable parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Grads<T> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of parameter #{i}")));
                }
                self.nodes[i].value.accumulate_grad(&g);
            } else {
                self.backprop(i, &g, &mut grads);
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut Grads<T>) {
        let out = &self.nodes[i].value;
        let len = |v: Var| self.value(v).numel();
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            &Op::Conv2d { x, w, b, ref geom } => {
                let mut bufs = [x, w, b].map(|v| self.needs(v).then(|| take_slot(grads, v, len(v))));
                let [dx, dw, db] = &mut bufs;
                kernels::conv2d_backward(
                    geom,
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, buf) in [x, w, b].into_iter().zip(bufs) {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            &Op::Deconv { x, w, b, ref geom } => {
                let mut bufs = [x, w, b].map(|v| self.needs(v).then(|| take_slot(grads, v, len(v))));
                let [dx, dw, db] = &mut bufs;
                kernels::deconv2x2_backward(
                    geom,
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, buf) in [x, w, b].into_iter().zip(bufs) {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::ReduceChannel { x, dims, mode, argmax } => {
                let [n, c, h, w] = *dims;
                let p = h * w;
                let dx = slot(grads, *x, n * c * p);
                match mode {
                    ReduceMode::Avg => {
                        let inv = T::one() / T::of(c as f64);
                        for b in 0..n {
                            for ch in 0..c {
                                let dst = &mut dx[(b * c + ch) * p..][..p];
                                for (d, &gv) in dst.iter_mut().zip(&g[b * p..(b + 1) * p]) {
                                    *d = *d + gv * inv;
                                }
                            }
                        }
                    }
                    ReduceMode::Max => {
                        for b in 0..n {
                            for j in 0..p {
                                let ch = argmax[b * p + j] as usize;
                                let at = (b * c + ch) * p + j;
                                dx[at] = dx[at] + g[b * p + j];
                            }
                        }
                    }
                }
            }
            &Op::GlobalAvgPool { x, dims } => {
                let [n, c, h, w] = dims;
                let inv = T::one() / T::of((h * w) as f64);
                let dx = slot(grads, x, n * c * h * w);
                for (plane, &gv) in dx.chunks_mut(h * w).zip(g) {
                    plane.iter_mut().for_each(|d| *d = *d + gv * inv);
                }
            }
            &Op::Linear { x, w, b, n, c, co } => {
                if self.needs(b) {
                    let db = slot(grads, b, co);
                    for row in g.chunks(co) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                }
                if self.needs(w) {
                    let dw = slot(grads, w, co * c);
                    super::gemm(
                        co,
                        n,
                        c,
                        T::one(),
                        g,
                        (1, co),
                        self.value(x).data(),
                        (c, 1),
                        T::one(),
                        dw,
                        (c, 1),
                    );
                }
                if self.needs(x) {
                    let dx = slot(grads, x, n * c);
                    super::gemm(
                        n,
                        co,
                        c,
                        T::one(),
                        g,
                        (co, 1),
                        self.value(w).data(),
                        (c, 1),
                        T::one(),
                        dx,
                        (c, 1),
                    );
                }
            }
            &Op::Sigmoid(x) => {
                let dx = slot(grads, x, g.len());
                for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d = *d + gv * y * (T::one() - y);
                }
            }
            &Op::Relu(x) => {
                let dx = slot(grads, x, g.len());
                for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                    if y > T::zero() {
                        *d = *d + gv;
                    }
                }
            }
            &Op::Exp(x) => {
                let dx = slot(grads, x, g.len());
                for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d = *d + gv * y;
                }
            }
            &Op::ScaleConst { x, c } => {
                let dx = slot(grads, x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * c);
            }
            &Op::MulScalar { x, s } => {
                let k = self.value(s).data()[0];
                if self.needs(s) {
                    let ds: T = g.iter().zip(self.value(x).data()).map(|(&a, &b)| a * b).sum();
                    let buf = slot(grads, s, 1);
                    buf[0] = buf[0] + ds;
                }
                if self.needs(x) {
                    let dx = slot(grads, x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * k);
                }
            }
            Op::Concat { xs, n, chans, plane } => {
                let total: usize = chans.iter().sum();
                let mut off = 0;
                for (&v, &c) in xs.iter().zip(chans) {
                    if self.needs(v) {
                        let dx = slot(grads, v, n * c * plane);
                        for b in 0..*n {
                            let src = &g[(b * total + off) * plane..][..c * plane];
                            let dst = &mut dx[b * c * plane..(b + 1) * c * plane];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                        }
                    }
                    off += c;
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        add_into(grads, v, g);
                    }
                }
            }
            &Op::ScaleChannels { x, gate, dims } => {
                let [n, c, h, w] = dims;
                let p = h * w;
                if self.needs(gate) {
                    let xs = self.value(x).data();
                    let dg = slot(grads, gate, n * c);
                    for (j, d) in dg.iter_mut().enumerate() {
                        let s: T = g[j * p..(j + 1) * p]
                            .iter()
                            .zip(&xs[j * p..(j + 1) * p])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        *d = *d + s;
                    }
                }
                if self.needs(x) {
                    let gs = self.value(gate).data();
                    let dx = slot(grads, x, n * c * p);
                    for (j, plane) in dx.chunks_mut(p).enumerate() {
                        let k = gs[j];
                        plane
                            .iter_mut()
                            .zip(&g[j * p..(j + 1) * p])
                            .for_each(|(d, &gv)| *d = *d + gv * k);
                    }
                }
            }
            &Op::ScaleSpatial { x, gate, dims } => {
                let [n, c, h, w] = dims;
                let p = h * w;
                if self.needs(gate) {
                    let xs = self.value(x).data();
                    let dg = slot(grads, gate, n * p);
                    for b in 0..n {
                        for ch in 0..c {
                            let at = (b * c + ch) * p;
                            for j in 0..p {
                                dg[b * p + j] = dg[b * p + j] + g[at + j] * xs[at + j];
                            }
                        }
                    }
                }
                if self.needs(x) {
                    let gs = self.value(gate).data();
                    let dx = slot(grads, x, n * c * p);
                    for b in 0..n {
                        for ch in 0..c {
                            let at = (b * c + ch) * p;
                            for j in 0..p {
                                dx[at + j] = dx[at + j] + g[at + j] * gs[b * p + j];
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let dx = slot(grads, *x, len(*x));
                for (&a, &gv) in argmax.iter().zip(g) {
                    dx[a as usize] = dx[a as usize] + gv;
                }
            }
            &Op::Upsample2x { x, dims } => {
                let [n, c, h, w] = dims;
                let dx = slot(grads, x, n * c * h * w);
                for (pl, plane) in dx.chunks_mut(h * w).enumerate() {
                    let src = &g[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let d = &mut plane[(y / 2) * w + xx / 2];
                            *d = *d + src[y * 2 * w + xx];
                        }
                    }
                }
            }
            Op::RoiAlign { levels, rois, c } => {
                let c = *c;
                for (slot_idx, &lv) in levels.iter().enumerate() {
                    if !self.needs(lv) || !rois.iter().any(|r| r.level == slot_idx) {
                        continue;
                    }
                    let [_, _, h, w] = self.value(lv).dims4().expect("validated");
                    let dl = slot(grads, lv, len(lv));
                    for (r, roi) in rois.iter().enumerate() {
                        if roi.level != slot_idx {
                            continue;
                        }
                        let bins = roi.bins.len();
                        for ch in 0..c {
                            let plane = &mut dl[(roi.batch * c + ch) * h * w..][..h * w];
                            let gsrc = &g[(r * c + ch) * bins..][..bins];
                            for (taps, &gv) in roi.bins.iter().zip(gsrc) {
                                for &(idx, wt) in taps {
                                    plane[idx as usize] = plane[idx as usize] + gv * T::of(wt);
                                }
                            }
                        }
                    }
                }
            }
            &Op::Reshape(x) => add_into(grads, x, g),
            Op::Gather { x, idx, k, inner } => {
                let dx = slot(grads, *x, idx.len() * k * inner);
                for (r, &ch) in idx.iter().enumerate() {
                    let dst = &mut dx[(r * k + ch) * inner..][..*inner];
                    dst.iter_mut()
                        .zip(&g[r * inner..(r + 1) * inner])
                        .for_each(|(d, &gv)| *d = *d + gv);
                }
            }
            Op::Fused { x, dx: local } => {
                let up = g[0];
                let dx = slot(grads, *x, local.len());
                dx.iter_mut().zip(local).for_each(|(d, &l)| *d = *d + up * l);
            }
            &Op::Sum(x) => {
                let up = g[0];
                let dx = slot(grads, x, len(x));
                dx.iter_mut().for_each(|d| *d = *d + up);
            }
        }
    }
}

fn kernels_linear<T: Scalar>(n: usize, c: usize, co: usize, x: &[T], w: &[T], out: &mut [T]) {
    // out (n×co) += x (n×c) · wᵀ (c×co)
    super::gemm(n, c, co, T::one(), x, (c, 1), w, (1, c), T::one(), out, (co, 1));
}

fn sigmoid64(z: f64) -> f64 {
    kernels::sigmoid(z)
}

/// Focal loss of one logit and its derivative with respect to the logit.
pub(crate) fn focal_term(z: f64, positive: bool, alpha: Option<f64>, gamma: f64) -> (f64, f64) {
    let p = sigmoid64(z);
    if positive {
        let a = alpha.unwrap_or(1.0);
        let log_p = -kernels::softplus(-z);
        let q = 1.0 - p;
        let loss = -a * q.powf(gamma) * log_p;
        let grad = a * q.powf(gamma) * (gamma * p * log_p - q);
        (loss, grad)
    } else {
        let a = alpha.map_or(1.0, |a| 1.0 - a);
        let log_q = -kernels::softplus(z);
        let loss = -a * p.powf(gamma) * log_q;
        let grad = a * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q);
        (loss, grad)
    }
}

/// `-ln IoU` of two boxes given as (l, t, r, b) offsets from a shared point,
/// with its gradient with respect to the predicted offsets.
pub(crate) fn iou_term(pred: [f64; 4], tgt: [f64; 4]) -> (f64, [f64; 4]) {
    let [pl, pt, pr, pb] = pred;
    let [tl, tt, tr, tb] = tgt;
    let pw = pl + pr;
    let ph = pt + pb;
    let area_p = pw * ph;
    let area_t = (tl + tr) * (tt + tb);
    let iw = pl.min(tl) + pr.min(tr);
    let ih = pt.min(tt) + pb.min(tb);
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let loss = union.ln() - inter.ln();
    // d(inter)/d(side) is the opposite extent when the prediction is the tighter side.
    let di = [
        if pl <= tl { ih } else { 0.0 },
        if pt <= tt { iw } else { 0.0 },
        if pr <= tr { ih } else { 0.0 },
        if pb <= tb { iw } else { 0.0 },
    ];
    let da = [ph, pw, ph, pw];
    let grad = [0, 1, 2, 3].map(|s| (da[s] - di[s]) / union - di[s] / inter);
    (loss, grad)
}
