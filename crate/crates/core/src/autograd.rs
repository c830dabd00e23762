//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and the ids of its operands. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every node that needs one. Shape
//! mismatches are programming errors and panic.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Concat(Vec<Var>),
    Slice {
        a: Var,
        start: usize,
    },
    MeanHw(Var),
    SumAll(Var),
    Upsample(Var),
    AvgPool2(Var),
    PadReplicate {
        a: Var,
        pad: usize,
    },
    Propagate {
        depth: Var,
        weights: Var,
        offsets: Var,
        iterations: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    bound: Vec<Option<Var>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// Graph without parameters; only inputs and constants.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            bound: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Parameters touched by this graph together with their leaf vars.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let ng = self.ng(a);
        self.push(value, Op::Offset(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// ELU with unit alpha; continuously differentiable.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, elu, Op::Elu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// 2-D convolution with zero padding. `w` is `[c_out, c_in, kh, kw]`,
    /// `b` (optional) is `[1, c_out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&tensors);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_channels(start, len);
        let ng = self.ng(a);
        self.push(value, Op::Slice { a, start }, ng)
    }

    /// Global average pool over height and width.
    pub fn mean_hw(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for b in 0..n {
            for ch in 0..c {
                let m = t.plane(b, ch).iter().sum::<f64>() / (h * w) as f64;
                out.set(b, ch, 0, 0, m);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanHw(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Bilinear resize (half-pixel centres, edge clamped).
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Var {
        let value = resize_bilinear(self.value(a), out_h, out_w);
        let ng = self.ng(a);
        self.push(value, Op::Upsample(a), ng)
    }

    /// 2x2 average pooling with stride 2; a trailing odd row/column is dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let s = t.at(b, ch, 2 * y, 2 * x)
                            + t.at(b, ch, 2 * y, 2 * x + 1)
                            + t.at(b, ch, 2 * y + 1, 2 * x)
                            + t.at(b, ch, 2 * y + 1, 2 * x + 1);
                        out.set(b, ch, y, x, 0.25 * s);
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::AvgPool2(a), ng)
    }

    pub fn pad_replicate(&mut self, a: Var, pad: usize) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let mut out = Tensor::zeros([n, c, h + 2 * pad, w + 2 * pad]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h + 2 * pad {
                    let sy = y.saturating_sub(pad).min(h - 1);
                    for x in 0..w + 2 * pad {
                        let sx = x.saturating_sub(pad).min(w - 1);
                        out.set(b, ch, y, x, t.at(b, ch, sy, sx));
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::PadReplicate { a, pad }, ng)
    }

    /// One non-local propagation step.
    ///
    /// `depth` is `[n, 1, h, w]`, `weights` is `[n, k, h, w]` and `offsets`
    /// is `[n, 2k, h, w]` holding `(dy, dx)` pairs per neighbour. Each pixel
    /// becomes `(1 - sum_k w_k) * d + sum_k w_k * d(p + offset_k)` with
    /// neighbour values sampled bilinearly and positions clamped to the
    /// image.
    pub fn propagate_step(&mut self, depth: Var, weights: Var, offsets: Var) -> Var {
        self.propagate(depth, weights, offsets, 1)
    }

    /// `iterations` propagation steps with shared weights and offsets, as a
    /// single node.
    pub fn propagate(&mut self, depth: Var, weights: Var, offsets: Var, iterations: usize) -> Var {
        let value = propagate_forward_n(self.value(depth), self.value(weights), self.value(offsets), iterations);
        let ng = self.ng(depth) || self.ng(weights) || self.ng(offsets);
        self.push(
            value,
            Op::Propagate {
                depth,
                weights,
                offsets,
                iterations,
            },
            ng,
        )
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(*a, reduce_to(g, self.shape(*a)));
                }
                if self.ng(*b) {
                    acc(*b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    acc(*a, reduce_to(g, self.shape(*a)));
                }
                if self.ng(*b) {
                    acc(*b, reduce_to(&g.scale(-1.0), self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let full = broadcast_zip3(g, vb, out.shape(), |gv, y| gv * y);
                    acc(*a, reduce_to(&full, va.shape()));
                }
                if self.ng(*b) {
                    let full = broadcast_zip3(g, va, out.shape(), |gv, x| gv * x);
                    acc(*b, reduce_to(&full, vb.shape()));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
            Op::Elu(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { gv * xv.exp() }),
                )
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))
            }
            Op::Exp(a) => acc(*a, g.zip_map(out, |gv, y| gv * y)),
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gv, xv| gv * sign(xv)))
            }
            Op::Square(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gv, xv| 2.0 * gv * xv))
            }
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.ng(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[1];
                    if self.ng(p) {
                        acc(p, g.slice_channels(start, len));
                    }
                    start += len;
                }
            }
            Op::Slice { a, start } => {
                let [n, c, h, w] = self.shape(*a);
                let len = g.channels();
                let mut full = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for ch in 0..len {
                        full.plane_mut(b, start + ch).copy_from_slice(g.plane(b, ch));
                    }
                }
                acc(*a, full);
            }
            Op::MeanHw(a) => {
                let [n, c, h, w] = self.shape(*a);
                let inv = 1.0 / (h * w) as f64;
                let mut full = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for ch in 0..c {
                        let v = g.at(b, ch, 0, 0) * inv;
                        full.plane_mut(b, ch).fill(v);
                    }
                }
                acc(*a, full);
            }
            Op::SumAll(a) => acc(*a, Tensor::full(self.shape(*a), g.data()[0])),
            Op::Upsample(a) => {
                let [_, _, h, w] = self.shape(*a);
                acc(*a, resize_bilinear_backward(g, h, w));
            }
            Op::AvgPool2(a) => {
                let [n, c, h, w] = self.shape(*a);
                let mut full = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..h / 2 {
                            for x in 0..w / 2 {
                                let v = 0.25 * g.at(b, ch, y, x);
                                full.set(b, ch, 2 * y, 2 * x, v);
                                full.set(b, ch, 2 * y, 2 * x + 1, v);
                                full.set(b, ch, 2 * y + 1, 2 * x, v);
                                full.set(b, ch, 2 * y + 1, 2 * x + 1, v);
                            }
                        }
                    }
                }
                acc(*a, full);
            }
            Op::PadReplicate { a, pad } => {
                let [n, c, h, w] = self.shape(*a);
                let mut full = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..h + 2 * pad {
                            let sy = y.saturating_sub(*pad).min(h - 1);
                            for x in 0..w + 2 * pad {
                                let sx = x.saturating_sub(*pad).min(w - 1);
                                let i = full.index(b, ch, sy, sx);
                                full.data_mut()[i] += g.at(b, ch, y, x);
                            }
                        }
                    }
                }
                acc(*a, full);
            }
            Op::Propagate {
                depth,
                weights,
                offsets,
                iterations,
            } => {
                let (dd, dw, doff) = propagate_backward(
                    self.value(*depth),
                    self.value(*weights),
                    self.value(*offsets),
                    g,
                    *iterations,
                );
                acc(*depth, dd);
                acc(*weights, dw);
                acc(*offsets, doff);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled if the loss does not depend on it.
    pub fn get_or_zeros(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Per-parameter gradients for every parameter the graph touched.
    pub fn params(&self, graph: &Graph<'_>) -> Vec<(ParamId, Tensor)> {
        graph
            .bound_params()
            .map(|(id, v)| (id, self.get_or_zeros(graph, v)))
            .collect()
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Shape {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

fn strides_for(shape: Shape, out: Shape) -> [usize; 4] {
    let dense = [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if shape[i] == out[i] { dense[i] } else { 0 };
    }
    s
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    broadcast_zip3(a, b, out, f)
}

/// Elementwise `f(a, b)` evaluated over `out`, with both operands broadcast.
fn broadcast_zip3(a: &Tensor, b: &Tensor, out: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == out && b.shape() == out {
        return a.zip_map(b, f);
    }
    let sa = strides_for(a.shape(), out);
    let sb = strides_for(b.shape(), out);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.iter().product());
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                let base_a = n * sa[0] + c * sa[1] + y * sa[2];
                let base_b = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out[3] {
                    data.push(f(ad[base_a + x * sa[3]], bd[base_b + x * sb[3]]));
                }
            }
        }
    }
    Tensor::new(out, data)
}

/// Sum `g` over the axes along which `shape` was broadcast.
fn reduce_to(g: &Tensor, shape: Shape) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let gs = g.shape();
    let st = strides_for(shape, gs);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let gd = g.data();
    let mut i = 0;
    for n in 0..gs[0] {
        for c in 0..gs[1] {
            for y in 0..gs[2] {
                let base = n * st[0] + c * st[1] + y * st[2];
                for x in 0..gs[3] {
                    od[base + x * st[3]] += gd[i];
                    i += 1;
                }
            }
        }
    }
    out
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= k, "convolution kernel larger than padded input");
    (input + 2 * pad - k) / stride + 1
}

/// Unfold one batch item into a `[c*kh*kw, oh*ow]` column matrix.
fn im2col(x: &Tensor, b: usize, kh: usize, kw: usize, stride: usize, pad: usize, cols: &mut [f64]) {
    let [_, c, h, w] = x.shape();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let p = oh * ow;
    for ch in 0..c {
        let plane = x.plane(b, ch);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    dx: &mut Tensor,
    b: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let [_, c, h, w] = dx.shape();
    let p = oh * ow;
    for ch in 0..c {
        let plane = dx.plane_mut(b, ch);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += cols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m, n] = alpha * a[m, k] * b[k, n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: all slices are sized by the callers to cover the strided
    // extents `m*k`, `k*n` and `m*n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [n, c, h, wd] = x.shape();
    let [co, ci, kh, kw] = w.shape();
    assert_eq!(c, ci, "conv2d input channels {c} != weight channels {ci}");
    assert!(stride >= 1);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let p = oh * ow;
    let kk = ci * kh * kw;
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let mut cols = vec![0.0; kk * p];
    for b in 0..n {
        im2col(x, b, kh, kw, stride, pad, &mut cols);
        let start = b * co * p;
        let dst = &mut out.data_mut()[start..start + co * p];
        if let Some(bias) = bias {
            assert_eq!(bias.len(), co, "bias length mismatch");
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(bias.data()[o]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(co, kk, p, w.data(), (kk as isize, 1), &cols, (p as isize, 1), beta, dst);
    }
    out
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, _, _, _] = x.shape();
    let [co, ci, kh, kw] = w.shape();
    let [_, _, oh, ow] = g.shape();
    let p = oh * ow;
    let kk = ci * kh * kw;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, co, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![0.0; kk * p];
    let mut dcols = vec![0.0; kk * p];
    for b in 0..n {
        let gb = &g.data()[b * co * p..(b + 1) * co * p];
        for (o, row) in gb.chunks(p).enumerate() {
            db.data_mut()[o] += row.iter().sum::<f64>();
        }
        im2col(x, b, kh, kw, stride, pad, &mut cols);
        // dW[co, kk] += g[co, p] * cols^T[p, kk]
        gemm(co, p, kk, gb, (p as isize, 1), &cols, (1, p as isize), 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            // dcols[kk, p] = W^T[kk, co] * g[co, p]
            gemm(kk, co, p, w.data(), (1, kk as isize), gb, (p as isize, 1), 0.0, &mut dcols);
            col2im(&dcols, dx, b, kh, kw, stride, pad, oh, ow);
        }
    }
    (dx, dw, db)
}

struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_taps(input: usize, output: usize) -> AxisTaps {
    let scale = input as f64 / output as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(if hi == lo { 0.0 } else { src - lo as f64 });
    }
    taps
}

pub(crate) fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for b in 0..n {
        for ch in 0..c {
            let src = t.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oy in 0..out_h {
                let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

fn resize_bilinear_backward(g: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, out_h, out_w] = g.shape();
    if (h, w) == (out_h, out_w) {
        return g.clone();
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = g.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oy in 0..out_h {
                let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let gv = src[oy * out_w + ox];
                    dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                    dst[y1 * w + x1] += gv * fy * fx;
                }
            }
        }
    }
    out
}

/// Bilinear sample position with border clamping: the top-left corner
/// index and the steps to the right and lower neighbours (zero where the
/// position is clamped to the last row or column).
#[derive(Clone, Copy)]
struct Sample {
    base: u32,
    sx: u32,
    sy: u32,
    /// Bit 0: the unclamped row lies inside the image; bit 1: the column
    /// does. Clamped coordinates carry no positional gradient.
    inside: u8,
    fy: f64,
    fx: f64,
}

fn sample_axis(pos: f64, len: usize) -> (usize, usize, f64, bool) {
    let max = (len - 1) as f64;
    let inside = (0.0..=max).contains(&pos);
    let p = pos.clamp(0.0, max);
    let lo = (p.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    let f = if hi == lo { 0.0 } else { p - lo as f64 };
    (lo, hi, f, inside && len > 1)
}

fn sample_at(y: f64, x: f64, h: usize, w: usize) -> Sample {
    let (y0, y1, fy, inside_y) = sample_axis(y, h);
    let (x0, x1, fx, inside_x) = sample_axis(x, w);
    Sample {
        base: (y0 * w + x0) as u32,
        sx: (x1 - x0) as u32,
        sy: ((y1 - y0) * w) as u32,
        inside: u8::from(inside_y) | (u8::from(inside_x) << 1),
        fy,
        fx,
    }
}

impl Sample {
    #[inline]
    fn corners(&self) -> [usize; 4] {
        let b = self.base as usize;
        let (sx, sy) = (self.sx as usize, self.sy as usize);
        [b, b + sx, b + sy, b + sy + sx]
    }

    #[inline]
    fn read(&self, plane: &[f64]) -> f64 {
        let [i00, i01, i10, i11] = self.corners();
        let top = plane[i00] * (1.0 - self.fx) + plane[i01] * self.fx;
        let bot = plane[i10] * (1.0 - self.fx) + plane[i11] * self.fx;
        top * (1.0 - self.fy) + bot * self.fy
    }
}

/// Sample positions and affinities of one batch item, laid out pixel-major
/// with the `k` neighbours of a pixel adjacent.
struct Propagator {
    k: usize,
    samples: Vec<Sample>,
    weights: Vec<f64>,
}

impl Propagator {
    fn new(weights: &Tensor, offsets: &Tensor, b: usize) -> Self {
        let [_, k, h, w] = weights.shape();
        let hw = h * w;
        let mut samples = Vec::with_capacity(hw * k);
        let mut ws = Vec::with_capacity(hw * k);
        let off = offsets.data();
        let wt = weights.data();
        let obase = b * 2 * k * hw;
        let wbase = b * k * hw;
        for p in 0..hw {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            for m in 0..k {
                let dy = off[obase + 2 * m * hw + p];
                let dx = off[obase + (2 * m + 1) * hw + p];
                samples.push(sample_at(y + dy, x + dx, h, w));
                ws.push(wt[wbase + m * hw + p]);
            }
        }
        Self {
            k,
            samples,
            weights: ws,
        }
    }

    fn step(&self, plane: &[f64], out: &mut [f64]) {
        let k = self.k;
        for (p, o) in out.iter_mut().enumerate() {
            let d = plane[p];
            let mut acc = d;
            for m in 0..k {
                let wk = self.weights[p * k + m];
                if wk == 0.0 {
                    continue;
                }
                acc += wk * (self.samples[p * k + m].read(plane) - d);
            }
            *o = acc;
        }
    }

    /// Adds the gradients of one step taken from `plane` given the upstream
    /// gradient `g`; returns the gradient with respect to `plane`.
    fn step_backward(&self, plane: &[f64], g: &[f64], dw: &mut [f64], doff: &mut [f64]) -> Vec<f64> {
        let k = self.k;
        let mut dd = vec![0.0; plane.len()];
        for p in 0..plane.len() {
            let gv = g[p];
            if gv == 0.0 {
                continue;
            }
            let d = plane[p];
            let mut wsum = 0.0;
            for m in 0..k {
                let i = p * k + m;
                let wk = self.weights[i];
                wsum += wk;
                let s = &self.samples[i];
                dw[i] += gv * (s.read(plane) - d);
                let gw = gv * wk;
                if gw == 0.0 {
                    continue;
                }
                let [i00, i01, i10, i11] = s.corners();
                dd[i00] += gw * (1.0 - s.fy) * (1.0 - s.fx);
                dd[i01] += gw * (1.0 - s.fy) * s.fx;
                dd[i10] += gw * s.fy * (1.0 - s.fx);
                dd[i11] += gw * s.fy * s.fx;
                let (d00, d01, d10, d11) = (plane[i00], plane[i01], plane[i10], plane[i11]);
                if s.inside & 1 != 0 && s.sy != 0 {
                    doff[2 * i] += gw * ((1.0 - s.fx) * (d10 - d00) + s.fx * (d11 - d01));
                }
                if s.inside & 2 != 0 && s.sx != 0 {
                    doff[2 * i + 1] += gw * ((1.0 - s.fy) * (d01 - d00) + s.fy * (d11 - d10));
                }
            }
            dd[p] += gv * (1.0 - wsum);
        }
        dd
    }
}

fn check_propagation_shapes(depth: &Tensor, weights: &Tensor, offsets: &Tensor) {
    let [n, one, h, w] = depth.shape();
    assert_eq!(one, 1, "propagation expects a single-channel depth map");
    let k = weights.channels();
    assert_eq!(weights.shape(), [n, k, h, w], "affinity shape mismatch");
    assert_eq!(offsets.shape(), [n, 2 * k, h, w], "offset shape mismatch");
}

/// All intermediate depth planes of batch item `b`, `iterations + 1` of them.
fn propagate_trace(prop: &Propagator, depth: &Tensor, b: usize, iterations: usize) -> Vec<Vec<f64>> {
    let mut trace = Vec::with_capacity(iterations + 1);
    trace.push(depth.plane(b, 0).to_vec());
    for t in 0..iterations {
        let mut next = vec![0.0; trace[t].len()];
        prop.step(&trace[t], &mut next);
        trace.push(next);
    }
    trace
}

pub(crate) fn propagate_forward_n(depth: &Tensor, weights: &Tensor, offsets: &Tensor, iterations: usize) -> Tensor {
    check_propagation_shapes(depth, weights, offsets);
    let mut out = depth.clone();
    for b in 0..depth.batch() {
        let prop = Propagator::new(weights, offsets, b);
        let mut cur = depth.plane(b, 0).to_vec();
        let mut next = vec![0.0; cur.len()];
        for _ in 0..iterations {
            prop.step(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        out.plane_mut(b, 0).copy_from_slice(&cur);
    }
    out
}

fn propagate_backward(
    depth: &Tensor,
    weights: &Tensor,
    offsets: &Tensor,
    g: &Tensor,
    iterations: usize,
) -> (Tensor, Tensor, Tensor) {
    let [n, _, h, w] = depth.shape();
    let k = weights.channels();
    let hw = h * w;
    let mut dd = Tensor::zeros(depth.shape());
    let mut dw = Tensor::zeros(weights.shape());
    let mut doff = Tensor::zeros(offsets.shape());
    for b in 0..n {
        let prop = Propagator::new(weights, offsets, b);
        let trace = propagate_trace(&prop, depth, b, iterations);
        let mut dw_local = vec![0.0; hw * k];
        let mut doff_local = vec![0.0; hw * k * 2];
        let mut grad = g.plane(b, 0).to_vec();
        for t in (0..iterations).rev() {
            grad = prop.step_backward(&trace[t], &grad, &mut dw_local, &mut doff_local);
        }
        dd.plane_mut(b, 0).copy_from_slice(&grad);
        for p in 0..hw {
            for m in 0..k {
                let i = p * k + m;
                dw.plane_mut(b, m)[p] = dw_local[i];
                doff.plane_mut(b, 2 * m)[p] = doff_local[2 * i];
                doff.plane_mut(b, 2 * m + 1)[p] = doff_local[2 * i + 1];
            }
        }
    }
    (dd, dw, doff)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = crate::params::seeded_rng(3);
        let x = Tensor::randn([2, 3, 5, 6], 1.0, &mut rng);
        let w = Tensor::randn([4, 3, 3, 3], 1.0, &mut rng);
        let bias = Tensor::randn([1, 4, 1, 1], 1.0, &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let out = conv2d_forward(&x, &w, Some(&bias), stride, pad);
            let [_, _, oh, ow] = out.shape();
            for b in 0..2 {
                for o in 0..4 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = bias.data()[o];
                            for c in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                            s += w.at(o, c, ky, kx) * x.at(b, c, iy as usize, ix as usize);
                                        }
                                    }
                                }
                            }
                            assert!((s - out.at(b, o, oy, ox)).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_mul_and_reduce() {
        let mut g = Graph::new();
        let f = g.input(Tensor::new([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let m = g.input(Tensor::new([1, 1, 1, 2], vec![10.0, 20.0]));
        let p = g.mul(f, m);
        assert_eq!(g.value(p).data(), &[10.0, 40.0, 30.0, 80.0]);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(m).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(grads.get(f).unwrap().data(), &[10.0, 20.0, 10.0, 20.0]);
    }

    #[test]
    fn upsample_identity_when_same_size() {
        let t = Tensor::from_plane(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(resize_bilinear(&t, 2, 2), t);
        let up = resize_bilinear(&Tensor::full([1, 1, 2, 2], 3.0), 5, 7);
        assert!(up.data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(3.0));
        let p = g.mul(a, b);
        let grads = g.backward(p);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }
}
