//! Wengert tape: operations are recorded in execution order during the
//! forward pass and replayed in reverse by [`Tape::backward`].
//!
//! A fresh tape is built for every optimization step. Parameters enter as
//! leaves with `requires_grad`; frozen parameters and data enter as
//! constants and never receive gradients.

use std::f32::consts::PI;

use super::conv::{self, ConvGeom};
use super::fft;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    SafeDiv(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    WrapAngle(Var),
    Sum(Var),
    Mean(Var),
    SpatialMean(Var),
    BroadcastSpatial(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample2x(Var),
    Downsample2x(Var),
    /// Reduction over the channel axis; `index` holds the selected channel.
    ChannelSelect {
        x: Var,
        index: Vec<u32>,
    },
    /// Sliding-window minimum; `index` holds the flat source offset in the plane.
    MinPool {
        x: Var,
        index: Vec<u32>,
    },
    FftRe(Var),
    FftIm(Var),
    Amplitude {
        re: Var,
        im: Var,
    },
    Phase {
        re: Var,
        im: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | SafeDiv(a, b) => vec![*a, *b],
            Scale(x, _)
            | AddScalar(x)
            | Relu(x)
            | Abs(x)
            | Sqrt(x)
            | WrapAngle(x)
            | Sum(x)
            | Mean(x)
            | SpatialMean(x)
            | BroadcastSpatial(x)
            | Upsample2x(x)
            | Downsample2x(x)
            | FftRe(x)
            | FftIm(x) => vec![*x],
            Clamp { x, .. } | Narrow { x, .. } | ChannelSelect { x, .. } | MinPool { x, .. } => {
                vec![*x]
            }
            Concat(xs) => xs.clone(),
            Amplitude { re, im } | Phase { re, im } => vec![*re, *im],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of every node that requires them, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            op,
            format!("operand dims {:?} and {:?} differ", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// Bilinear (half-pixel centers) taps for doubling an axis of length `n`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_map(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_dims(op_name, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.dims().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    /// Zero-padded cross-correlation of an `[N, Cin, H, W]` input with
    /// `[Cout, Cin, k, k]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        )?;
        let value = conv::forward(
            &geom,
            self.value(input),
            self.value(weight),
            self.value(bias),
        );
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a / b`, defined as 0 (with zero gradient) wherever `b == 0`.
    pub fn safe_div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(
            "safe_div",
            a,
            b,
            |x, y| if y == 0.0 { 0.0 } else { x / y },
            Op::SafeDiv(a, b),
        )
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f32::abs, Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f32::sqrt, Op::Sqrt(x))
    }

    /// Clamp with pass-through gradient inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Wraps angles into `(-pi, pi]`; the gradient is the identity.
    pub fn wrap_angle(&mut self, x: Var) -> Var {
        self.unary(x, wrap, Op::WrapAngle(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(m as f32), Op::Mean(x))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Per-sample, per-channel mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.nchw("spatial_mean")?;
        if h * w == 0 {
            return Err(Error::shape("spatial_mean", "empty spatial extent"));
        }
        let data = t
            .data()
            .chunks_exact(h * w)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
            .collect();
        let value = Tensor::new([n, c], data)?;
        Ok(self.push(value, Op::SpatialMean(x)))
    }

    /// Expands `[N, C]` statistics to constant `[N, C, H, W]` planes.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c] = t.dims()[..] else {
            return Err(Error::shape(
                "broadcast_spatial",
                format!("expected [N, C] statistics, got {:?}", t.dims()),
            ));
        };
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in t.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let value = Tensor::new([n, c, h, w], data)?;
        Ok(self.push(value, Op::BroadcastSpatial(x)))
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let (n, _, h, w) = self.value(*first).nchw("concat")?;
        let mut total_c = 0;
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).nchw("concat")?;
            for (axis, expected, got) in [("batch", n, xn), ("height", h, xh), ("width", w, xw)] {
                if expected != got {
                    return Err(Error::Dimension {
                        op: "concat",
                        axis,
                        expected,
                        got,
                    });
                }
            }
            total_c += xc;
        }
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for &x in xs {
                let t = self.value(x);
                let per = t.numel() / n;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let value = Tensor::new([n, total_c, h, w], data)?;
        Ok(self.push(value, Op::Concat(xs.to_vec())))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let dims = t.dims();
        if axis >= dims.len() {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} out of range for {dims:?}"),
            ));
        }
        if start + len > dims[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                axis: "sliced",
                expected: dims[axis],
                got: start + len,
            });
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dims[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_dims = dims.to_vec();
        out_dims[axis] = len;
        let value = Tensor::new(out_dims, data)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }))
    }

    /// Bilinear doubling of both spatial axes (half-pixel centers).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.nchw("upsample2x")?;
        if h == 0 || w == 0 {
            return Err(Error::shape("upsample2x", "empty spatial extent"));
        }
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let mut data = vec![0.0; n * c * 4 * h * w];
        let mut rows = vec![0.0; h * 2 * w];
        for (src, dst) in t
            .data()
            .chunks_exact(h * w)
            .zip(data.chunks_exact_mut(4 * h * w))
        {
            for y in 0..h {
                for (ox, &(a, b, f)) in tx.iter().enumerate() {
                    let (va, vb) = (src[y * w + a], src[y * w + b]);
                    rows[y * 2 * w + ox] = va + f * (vb - va);
                }
            }
            for (oy, &(a, b, f)) in ty.iter().enumerate() {
                for ox in 0..2 * w {
                    let (va, vb) = (rows[a * 2 * w + ox], rows[b * 2 * w + ox]);
                    dst[oy * 2 * w + ox] = va + f * (vb - va);
                }
            }
        }
        let value = Tensor::new([n, c, 2 * h, 2 * w], data)?;
        Ok(self.push(value, Op::Upsample2x(x)))
    }

    /// 2x2 average pooling; equals bilinear halving with half-pixel centers.
    pub fn downsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.nchw("downsample2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "downsample2x",
                format!("extents {h}x{w} must be even"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut data = vec![0.0; n * c * ho * wo];
        for (src, dst) in t
            .data()
            .chunks_exact(h * w)
            .zip(data.chunks_exact_mut(ho * wo))
        {
            for y in 0..ho {
                for x in 0..wo {
                    let i = 2 * y * w + 2 * x;
                    dst[y * wo + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], data)?;
        Ok(self.push(value, Op::Downsample2x(x)))
    }

    fn channel_select(&mut self, x: Var, better: impl Fn(f32, f32) -> bool) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.nchw("channel_reduce")?;
        if c == 0 {
            return Err(Error::shape("channel_reduce", "no channels"));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * plane);
        let mut index = Vec::with_capacity(n * plane);
        for b in 0..n {
            let sample = &t.data()[b * c * plane..(b + 1) * c * plane];
            for p in 0..plane {
                let mut best = (0u32, sample[p]);
                for ch in 1..c {
                    let v = sample[ch * plane + p];
                    if better(v, best.1) {
                        best = (ch as u32, v);
                    }
                }
                data.push(best.1);
                index.push(best.0);
            }
        }
        let value = Tensor::new([n, 1, h, w], data)?;
        Ok(self.push(value, Op::ChannelSelect { x, index }))
    }

    /// Minimum over channels, `[N, C, H, W] -> [N, 1, H, W]`; ties go to the first channel.
    pub fn channel_min(&mut self, x: Var) -> Result<Var> {
        self.channel_select(x, |v, best| v < best)
    }

    /// Maximum over channels; ties go to the first channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        self.channel_select(x, |v, best| v > best)
    }

    /// Stride-1 minimum filter over a `patch x patch` window with replicate
    /// padding. The gradient goes to the first minimal element in scan order.
    pub fn min_pool(&mut self, x: Var, patch: usize) -> Result<Var> {
        if patch.is_multiple_of(2) {
            return Err(Error::Config(format!("min-pool patch {patch} must be odd")));
        }
        let t = self.value(x);
        let (_, h, w) = t.planes("min_pool")?;
        let mut data = Vec::with_capacity(t.numel());
        let mut index = Vec::with_capacity(t.numel());
        for plane in t.data().chunks_exact(h * w) {
            min_filter(plane, h, w, patch, |v, i| {
                data.push(v);
                index.push(i as u32);
            });
        }
        let value = Tensor::new(t.dims().to_vec(), data)?;
        Ok(self.push(value, Op::MinPool { x, index }))
    }

    /// Unnormalized 2D DFT over the trailing axes; returns `(real, imag)`.
    pub fn fft2(&mut self, x: Var) -> Result<(Var, Var)> {
        let (re, im) = fft::fft2(self.value(x))?;
        let re = self.push(re, Op::FftRe(x));
        let im = self.push(im, Op::FftIm(x));
        Ok((re, im))
    }

    /// Amplitude and principal phase of a complex tensor.
    ///
    /// At the origin both outputs and both gradients are 0.
    pub fn amp_phase(&mut self, re: Var, im: Var) -> Result<(Var, Var)> {
        let (tr, ti) = (self.value(re), self.value(im));
        same_dims("amp_phase", tr, ti)?;
        let (amp, phase): (Vec<f32>, Vec<f32>) = tr
            .data()
            .iter()
            .zip(ti.data())
            .map(|(&r, &i)| fft::polar(r, i))
            .unzip();
        let dims = tr.dims().to_vec();
        let a = self.push(Tensor::new(dims.clone(), amp)?, Op::Amplitude { re, im });
        let p = self.push(Tensor::new(dims, phase)?, Op::Phase { re, im });
        Ok((a, p))
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                nodes[loss.0].value.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, &mut grads, node, &g);
        }
        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.dims().to_vec(), g).expect("grad extent")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn wrap(v: f32) -> f32 {
    let two_pi = 2.0 * PI;
    let mut r = v - two_pi * (v / two_pi).round();
    if r <= -PI {
        r += two_pi;
    } else if r > PI {
        r -= two_pi;
    }
    r
}

/// Shared minimum-filter kernel; `emit` receives the value and flat source index.
pub(crate) fn min_filter(
    plane: &[f32],
    h: usize,
    w: usize,
    patch: usize,
    mut emit: impl FnMut(f32, usize),
) {
    let r = patch / 2;
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut best = (plane[y0 * w + x0], y0 * w + x0);
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let v = plane[yy * w + xx];
                    if v < best.0 {
                        best = (v, yy * w + xx);
                    }
                }
            }
            emit(best.0, best.1);
        }
    }
}

/// Adds `contribution` into the gradient slot of `v` if it requires one.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(slot);
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f32>>], node: &Node, g: &[f32]) {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let cg = conv::backward(
                geom,
                val(*input),
                val(*weight),
                g,
                (needs(*input), needs(*weight), needs(*bias)),
            );
            if let Some(dx) = cg.input {
                accumulate(nodes, grads, *input, |s| add_into(s, &dx));
            }
            if let Some(dw) = cg.weight {
                accumulate(nodes, grads, *weight, |s| add_into(s, &dw));
            }
            if let Some(db) = cg.bias {
                accumulate(nodes, grads, *bias, |s| add_into(s, &db));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| add_into(s, g));
            accumulate(nodes, grads, *b, |s| add_into(s, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| add_into(s, g));
            accumulate(nodes, grads, *b, |s| {
                for (d, gv) in s.iter_mut().zip(g) {
                    *d -= gv;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |s| {
                for ((d, gv), y) in s.iter_mut().zip(g).zip(vb) {
                    *d += gv * y;
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for ((d, gv), x) in s.iter_mut().zip(g).zip(va) {
                    *d += gv * x;
                }
            });
        }
        Op::Div(a, b) | Op::SafeDiv(a, b) => {
            let safe = matches!(node.op, Op::SafeDiv(..));
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |s| {
                for ((d, gv), y) in s.iter_mut().zip(g).zip(vb) {
                    if !(safe && *y == 0.0) {
                        *d += gv / y;
                    }
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for (((d, gv), x), y) in s.iter_mut().zip(g).zip(va).zip(vb) {
                    if !(safe && *y == 0.0) {
                        *d -= gv * x / (y * y);
                    }
                }
            });
        }
        Op::Scale(x, k) => accumulate(nodes, grads, *x, |s| {
            for (d, gv) in s.iter_mut().zip(g) {
                *d += k * gv;
            }
        }),
        Op::AddScalar(x) | Op::WrapAngle(x) => accumulate(nodes, grads, *x, |s| add_into(s, g)),
        Op::Relu(x) => {
            let vx = val(*x).data();
            accumulate(nodes, grads, *x, |s| {
                for ((d, gv), v) in s.iter_mut().zip(g).zip(vx) {
                    if *v > 0.0 {
                        *d += gv;
                    }
                }
            });
        }
        Op::Abs(x) => {
            let vx = val(*x).data();
            accumulate(nodes, grads, *x, |s| {
                for ((d, gv), v) in s.iter_mut().zip(g).zip(vx) {
                    if *v > 0.0 {
                        *d += gv;
                    } else if *v < 0.0 {
                        *d -= gv;
                    }
                }
            });
        }
        Op::Sqrt(x) => {
            let out = node.value.data();
            accumulate(nodes, grads, *x, |s| {
                for ((d, gv), y) in s.iter_mut().zip(g).zip(out) {
                    *d += gv / (2.0 * y);
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let vx = val(*x).data();
            accumulate(nodes, grads, *x, |s| {
                for ((d, gv), v) in s.iter_mut().zip(g).zip(vx) {
                    if *v >= *lo && *v <= *hi {
                        *d += gv;
                    }
                }
            });
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |s| s.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(x) => {
            let k = g[0] / val(*x).numel().max(1) as f32;
            accumulate(nodes, grads, *x, |s| s.iter_mut().for_each(|d| *d += k));
        }
        Op::SpatialMean(x) => {
            let (_, _, h, w) = val(*x).nchw("spatial_mean").expect("checked in forward");
            let inv = 1.0 / (h * w) as f32;
            accumulate(nodes, grads, *x, |s| {
                for (plane, gv) in s.chunks_exact_mut(h * w).zip(g) {
                    plane.iter_mut().for_each(|d| *d += gv * inv);
                }
            });
        }
        Op::BroadcastSpatial(x) => {
            let (_, _, h, w) = node
                .value
                .nchw("broadcast_spatial")
                .expect("checked in forward");
            accumulate(nodes, grads, *x, |s| {
                for (d, plane) in s.iter_mut().zip(g.chunks_exact(h * w)) {
                    *d += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            });
        }
        Op::Concat(xs) => {
            let n = node.value.dims()[0];
            let per_out = node.value.numel() / n.max(1);
            let mut offset = 0;
            for &x in xs {
                let per = val(x).numel() / n.max(1);
                accumulate(nodes, grads, x, |s| {
                    for b in 0..n {
                        add_into(
                            &mut s[b * per..(b + 1) * per],
                            &g[b * per_out + offset..][..per],
                        );
                    }
                });
                offset += per;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_dims = val(*x).dims();
            let len = node.value.dims()[*axis];
            let outer: usize = in_dims[..*axis].iter().product();
            let inner: usize = in_dims[axis + 1..].iter().product();
            accumulate(nodes, grads, *x, |s| {
                for o in 0..outer {
                    let base = (o * in_dims[*axis] + start) * inner;
                    add_into(
                        &mut s[base..base + len * inner],
                        &g[o * len * inner..][..len * inner],
                    );
                }
            });
        }
        Op::Upsample2x(x) => {
            let (_, _, h, w) = val(*x).nchw("upsample2x").expect("checked in forward");
            let (ty, tx) = (upsample_taps(h), upsample_taps(w));
            accumulate(nodes, grads, *x, |s| {
                let mut rows = vec![0.0f32; h * 2 * w];
                for (dsrc, gout) in s.chunks_exact_mut(h * w).zip(g.chunks_exact(4 * h * w)) {
                    rows.fill(0.0);
                    for (oy, &(a, b, f)) in ty.iter().enumerate() {
                        for ox in 0..2 * w {
                            let gv = gout[oy * 2 * w + ox];
                            rows[a * 2 * w + ox] += (1.0 - f) * gv;
                            rows[b * 2 * w + ox] += f * gv;
                        }
                    }
                    for y in 0..h {
                        for (ox, &(a, b, f)) in tx.iter().enumerate() {
                            let gv = rows[y * 2 * w + ox];
                            dsrc[y * w + a] += (1.0 - f) * gv;
                            dsrc[y * w + b] += f * gv;
                        }
                    }
                }
            });
        }
        Op::Downsample2x(x) => {
            let (_, _, h, w) = val(*x).nchw("downsample2x").expect("checked in forward");
            let (ho, wo) = (h / 2, w / 2);
            accumulate(nodes, grads, *x, |s| {
                for (dsrc, gout) in s.chunks_exact_mut(h * w).zip(g.chunks_exact(ho * wo)) {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let gv = 0.25 * gout[y * wo + xx];
                            let i = 2 * y * w + 2 * xx;
                            dsrc[i] += gv;
                            dsrc[i + 1] += gv;
                            dsrc[i + w] += gv;
                            dsrc[i + w + 1] += gv;
                        }
                    }
                }
            });
        }
        Op::ChannelSelect { x, index } => {
            let (_, c, h, w) = val(*x).nchw("channel_reduce").expect("checked in forward");
            let plane = h * w;
            accumulate(nodes, grads, *x, |s| {
                for (k, (&ch, gv)) in index.iter().zip(g).enumerate() {
                    let (b, p) = (k / plane, k % plane);
                    s[(b * c + ch as usize) * plane + p] += gv;
                }
            });
        }
        Op::MinPool { x, index } => {
            let (_, h, w) = val(*x).planes("min_pool").expect("checked in forward");
            let plane = h * w;
            accumulate(nodes, grads, *x, |s| {
                for (k, (&src, gv)) in index.iter().zip(g).enumerate() {
                    s[(k / plane) * plane + src as usize] += gv;
                }
            });
        }
        Op::FftRe(x) | Op::FftIm(x) => {
            // Real and imaginary parts of the DFT matrix are symmetric, so the
            // adjoint of each part is the same part applied to the cotangent.
            let upstream =
                Tensor::new(node.value.dims().to_vec(), g.to_vec()).expect("grad extent");
            let (re, im) = fft::fft2(&upstream).expect("checked in forward");
            let part = if matches!(node.op, Op::FftRe(_)) {
                re
            } else {
                im
            };
            accumulate(nodes, grads, *x, |s| add_into(s, part.data()));
        }
        Op::Amplitude { re, im } | Op::Phase { re, im } => {
            let is_amp = matches!(node.op, Op::Amplitude { .. });
            let (vr, vi) = (val(*re).data(), val(*im).data());
            // d|z|/dr = r/|z|, d|z|/di = i/|z|; darg/dr = -i/|z|^2, darg/di = r/|z|^2.
            let partial = |k: usize, wrt_re: bool| -> f32 {
                let (r, i) = (vr[k] as f64, vi[k] as f64);
                let m2 = r * r + i * i;
                if m2 == 0.0 {
                    return 0.0;
                }
                let d = match (is_amp, wrt_re) {
                    (true, true) => r / m2.sqrt(),
                    (true, false) => i / m2.sqrt(),
                    (false, true) => -i / m2,
                    (false, false) => r / m2,
                };
                d as f32
            };
            accumulate(nodes, grads, *re, |s| {
                for (k, (d, gv)) in s.iter_mut().zip(g).enumerate() {
                    *d += gv * partial(k, true);
                }
            });
            accumulate(nodes, grads, *im, |s| {
                for (k, (d, gv)) in s.iter_mut().zip(g).enumerate() {
                    *d += gv * partial(k, false);
                }
            });
        }
    }
}
