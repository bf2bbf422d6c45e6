//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are coarse (matmul, conv2d, gather, segment softmax, ...) so a
//! forward pass through the whole model records a few thousand nodes rather
//! than millions of scalar ones. Every op evaluates in a fixed order on one
//! thread, which makes forward values and gradients bit-reproducible.

use std::rc::Rc;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Leaky rectifier with slope 0.2 on the negative side.
    LeakyRelu,
    /// Exponential linear unit with alpha = 1.
    Elu,
    Tanh,
    Sigmoid,
    Softplus,
}

const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Map(Var, Activation),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    Concat { parts: Vec<Var>, axis: usize },
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Rc<[usize]>),
    Conv2d { x: Var, w: Var, b: Option<Var> },
    TemporalConv { x: Var, w: Var, b: Option<Var> },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    Sum(Var),
    Cosine(Var, Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// True when some gradient reached `v`, even if it is numerically zero.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|x| scale * x + shift).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let ng = self.ng(a);
        self.push(t, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Same data viewed with a new shape.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = dims2(va.shape());
        let (k2, n) = dims2(vb.shape());
        assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", va.shape(), vb.shape());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = va.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &vb.data[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = dims2(va.shape());
        let (n, k2) = dims2(vb.shape());
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &va.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &vb.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulNt(a, b), ng)
    }

    /// Adds `bias` (length = last axis of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        let n = *va.shape().last().expect("add_bias on rank-0 tensor");
        assert_eq!(vb.len(), n, "bias length {} != last axis {}", vb.len(), n);
        let mut data = va.data.clone();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(Tensor::new(va.shape.clone(), data), Op::AddBias(a, bias), ng)
    }

    pub fn map(&mut self, a: Var, act: Activation) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| act.apply(x)).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let ng = self.ng(a);
        self.push(t, Op::Map(a, act), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Activation::Relu)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, Activation::Elu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Activation::Softplus)
    }

    /// `out[i] = a[index[i]]` over the flat data, reshaped to `shape`.
    /// Covers slicing, transposes, patch extraction and broadcasting.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Var {
        let va = self.value(a);
        let data: Vec<f64> = index.iter().map(|&i| va.data[i]).collect();
        let t = Tensor::new(shape, data);
        let ng = self.ng(a);
        self.push(t, Op::Gather(a, index), ng)
    }

    /// Adjoint of [`Graph::gather`]: `out[index[i]] += a[i]`.
    pub fn scatter_add(&mut self, a: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), index.len());
        let mut out = Tensor::zeros(shape);
        for (&i, v) in index.iter().zip(&va.data) {
            out.data[i] += v;
        }
        let ng = self.ng(a);
        self.push(out, Op::ScatterAdd(a, index), ng)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (x, y)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || x == y, "concat extent mismatch on axis {d}");
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape[axis] * inner;
                out.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(shape, out), Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = *va.shape().last().unwrap();
        let mut data = va.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(va.shape.clone(), data), Op::SoftmaxRows(a), ng)
    }

    /// Softmax within contiguous segments of a flat vector;
    /// segment `s` spans `offsets[s]..offsets[s + 1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: Rc<[usize]>) -> Var {
        let va = self.value(a);
        assert_eq!(*offsets.last().unwrap(), va.len());
        let mut data = va.data.clone();
        for w in offsets.windows(2) {
            softmax_in_place(&mut data[w[0]..w[1]]);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(va.shape.clone(), data), Op::SegmentSoftmax(a, offsets), ng)
    }

    /// Same-padded (zero) stride-1 convolution.
    /// `x: [n, cin, h, w]`, `w: [cout, cin, k, k]` with odd `k`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let (n, cin, h, wd) = dims4(vx.shape());
        let (cout, cin2, k, k2) = dims4(vw.shape());
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert!(k == k2 && k % 2 == 1, "conv2d kernel must be square and odd");
        let mut out = vec![0.0; n * cout * h * wd];
        conv2d_forward(&vx.data, &vw.data, &mut out, n, cin, cout, h, wd, k);
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.len(), cout);
            for img in 0..n {
                for co in 0..cout {
                    let base = (img * cout + co) * h * wd;
                    for o in &mut out[base..base + h * wd] {
                        *o += vb.data[co];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![n, cout, h, wd], out), Op::Conv2d { x, w, b }, ng)
    }

    /// Same-padded (zero) convolution along the leading (time) axis, applied
    /// independently at every spatial cell.
    /// `x: [t, cin, h, w]`, `w: [cout, cin, kt]` with odd `kt`, `b: [cout]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let (t, cin, h, wd) = dims4(vx.shape());
        let (cout, cin2, kt) = dims3(vw.shape());
        assert_eq!(cin, cin2, "temporal_conv channel mismatch");
        assert!(kt % 2 == 1, "temporal kernel length must be odd");
        let hw = h * wd;
        let pad = kt / 2;
        let mut out = vec![0.0; t * cout * hw];
        for to in 0..t {
            for co in 0..cout {
                let obase = (to * cout + co) * hw;
                for j in 0..kt {
                    let ti = to as isize + j as isize - pad as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let ti = ti as usize;
                    for ci in 0..cin {
                        let wv = vw.data[(co * cin + ci) * kt + j];
                        let ibase = (ti * cin + ci) * hw;
                        axpy(wv, &vx.data[ibase..ibase + hw], &mut out[obase..obase + hw]);
                    }
                }
                if let Some(b) = b {
                    let bv = self.value(b).data[co];
                    for o in &mut out[obase..obase + hw] {
                        *o += bv;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![t, cout, h, wd], out), Op::TemporalConv { x, w, b }, ng)
    }

    /// Non-overlapping `f x f` average pooling of `[n, c, h, w]`.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = dims4(vx.shape());
        assert!(h % f == 0 && w % f == 0, "avg_pool extent not divisible by {f}");
        let (ho, wo) = (h / f, w / f);
        let mut out = vec![0.0; n * c * ho * wo];
        let inv = 1.0 / (f * f) as f64;
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[plane * ho * wo + (y / f) * wo + xx / f] += vx.data[plane * h * w + y * w + xx];
                }
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c, ho, wo], out), Op::AvgPool(x, f), ng)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, f: usize) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = dims4(vx.shape());
        let (ho, wo) = (h * f, w * f);
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[plane * ho * wo + y * wo + xx] = vx.data[plane * h * w + (y / f) * w + xx / f];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c, ho, wo], out), Op::Upsample(x, f), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Cosine similarity of two equal-length vectors; defined as 0 when either
    /// has zero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "cosine length mismatch");
        let c = cosine_value(&va.data, &vb.data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(c), Op::Cosine(a, b), ng)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(a) => self.accum(grads, *a, |acc| add_into(acc, g)),
            Op::Add(a, b) => {
                self.accum(grads, *a, |acc| add_into(acc, g));
                self.accum(grads, *b, |acc| add_into(acc, g));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |acc| add_into(acc, g));
                self.accum(grads, *b, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let vb = &self.value(*b).data;
                self.accum(grads, *a, |acc| {
                    for ((x, gv), bv) in acc.iter_mut().zip(g).zip(vb) {
                        *x += gv * bv;
                    }
                });
                let va = &self.value(*a).data;
                self.accum(grads, *b, |acc| {
                    for ((x, gv), av) in acc.iter_mut().zip(g).zip(va) {
                        *x += gv * av;
                    }
                });
            }
            Op::Affine(a, s) => {
                self.accum(grads, *a, |acc| {
                    for (x, gv) in acc.iter_mut().zip(g) {
                        *x += s * gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(va.shape());
                let n = vb.shape()[1];
                self.accum(grads, *a, |acc| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            acc[i * k + p] += dot(grow, &vb.data[p * n..(p + 1) * n]);
                        }
                    }
                });
                self.accum(grads, *b, |acc| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va.data[i * k + p];
                            if av != 0.0 {
                                axpy(av, grow, &mut acc[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(va.shape());
                let n = vb.shape()[0];
                self.accum(grads, *a, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                axpy(gv, &vb.data[j * k..(j + 1) * k], &mut acc[i * k..(i + 1) * k]);
                            }
                        }
                    }
                });
                self.accum(grads, *b, |acc| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                axpy(gv, &va.data[i * k..(i + 1) * k], &mut acc[j * k..(j + 1) * k]);
                            }
                        }
                    }
                });
            }
            Op::AddBias(a, b) => {
                self.accum(grads, *a, |acc| add_into(acc, g));
                let n = self.value(*b).len();
                self.accum(grads, *b, |acc| {
                    for row in g.chunks(n) {
                        add_into(acc, row);
                    }
                });
            }
            Op::Map(a, act) => {
                let x = &self.value(*a).data;
                let y = &node.value.data;
                self.accum(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * act.derivative(x[i], y[i]);
                    }
                });
            }
            Op::Gather(a, index) => {
                self.accum(grads, *a, |acc| {
                    for (&i, gv) in index.iter().zip(g) {
                        acc[i] += gv;
                    }
                });
            }
            Op::ScatterAdd(a, index) => {
                self.accum(grads, *a, |acc| {
                    for (x, &i) in acc.iter_mut().zip(index.iter()) {
                        *x += g[i];
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.accum(grads, p, |acc| {
                        for o in 0..outer {
                            add_into(
                                &mut acc[o * chunk..(o + 1) * chunk],
                                &g[o * row + offset..o * row + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::SoftmaxRows(a) => {
                let n = *node.value.shape().last().unwrap();
                let y = &node.value.data;
                self.accum(grads, *a, |acc| {
                    for ((arow, yrow), grow) in acc.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        softmax_backward(arow, yrow, grow);
                    }
                });
            }
            Op::SegmentSoftmax(a, offsets) => {
                let y = &node.value.data;
                self.accum(grads, *a, |acc| {
                    for w in offsets.windows(2) {
                        let r = w[0]..w[1];
                        softmax_backward(&mut acc[r.clone()], &y[r.clone()], &g[r]);
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, cin, h, wd) = dims4(vx.shape());
                let (cout, _, k, _) = dims4(vw.shape());
                if let Some(b) = b {
                    self.accum(grads, *b, |acc| {
                        for img in 0..n {
                            for (co, a) in acc.iter_mut().enumerate() {
                                let base = (img * cout + co) * h * wd;
                                *a += g[base..base + h * wd].iter().sum::<f64>();
                            }
                        }
                    });
                }
                self.accum(grads, *x, |acc| {
                    conv2d_backward_input(g, &vw.data, acc, n, cin, cout, h, wd, k);
                });
                self.accum(grads, *w, |acc| {
                    conv2d_backward_weight(g, &vx.data, acc, n, cin, cout, h, wd, k);
                });
            }
            Op::TemporalConv { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (t, cin, h, wd) = dims4(vx.shape());
                let (cout, _, kt) = dims3(vw.shape());
                let hw = h * wd;
                let pad = kt / 2;
                if let Some(b) = b {
                    self.accum(grads, *b, |acc| {
                        for to in 0..t {
                            for (co, a) in acc.iter_mut().enumerate() {
                                let base = (to * cout + co) * hw;
                                *a += g[base..base + hw].iter().sum::<f64>();
                            }
                        }
                    });
                }
                let taps = |to: usize, j: usize| -> Option<usize> {
                    let ti = to as isize + j as isize - pad as isize;
                    (ti >= 0 && ti < t as isize).then_some(ti as usize)
                };
                self.accum(grads, *x, |acc| {
                    for to in 0..t {
                        for co in 0..cout {
                            let gb = (to * cout + co) * hw;
                            for j in 0..kt {
                                let Some(ti) = taps(to, j) else { continue };
                                for ci in 0..cin {
                                    let wv = vw.data[(co * cin + ci) * kt + j];
                                    let ib = (ti * cin + ci) * hw;
                                    axpy(wv, &g[gb..gb + hw], &mut acc[ib..ib + hw]);
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *w, |acc| {
                    for to in 0..t {
                        for co in 0..cout {
                            let gb = (to * cout + co) * hw;
                            for j in 0..kt {
                                let Some(ti) = taps(to, j) else { continue };
                                for ci in 0..cin {
                                    let ib = (ti * cin + ci) * hw;
                                    acc[(co * cin + ci) * kt + j] += dot(&g[gb..gb + hw], &vx.data[ib..ib + hw]);
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool(x, f) => {
                let (n, c, h, w) = dims4(self.shape(*x));
                let (ho, wo) = (h / f, w / f);
                let inv = 1.0 / (f * f) as f64;
                self.accum(grads, *x, |acc| {
                    for plane in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w {
                                acc[plane * h * w + y * w + xx] += inv * g[plane * ho * wo + (y / f) * wo + xx / f];
                            }
                        }
                    }
                });
            }
            Op::Upsample(x, f) => {
                let (n, c, h, w) = dims4(self.shape(*x));
                let (ho, wo) = (h * f, w * f);
                self.accum(grads, *x, |acc| {
                    for plane in 0..n * c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                acc[plane * h * w + (y / f) * w + xx / f] += g[plane * ho * wo + y * wo + xx];
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.accum(grads, *a, |acc| {
                    for x in acc.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                let na = dot(va, va).sqrt();
                let nb = dot(vb, vb).sqrt();
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let c = node.value.data[0];
                let gv = g[0];
                // d cos / d a = b / (|a||b|) - cos * a / |a|^2
                self.accum(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gv * (vb[i] / (na * nb) - c * va[i] / (na * na));
                    }
                });
                self.accum(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gv * (va[i] / (na * nb) - c * vb[i] / (nb * nb));
                    }
                });
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

pub fn cosine_value(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else if a == b {
        // exact, where the quotient below can round to 1 - ulp
        1.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(acc: &mut [f64], y: &[f64], g: &[f64]) {
    let s = dot(y, g);
    for i in 0..acc.len() {
        acc[i] += y[i] * (g[i] - s);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(x: &[f64], w: &[f64], out: &mut [f64], n: usize, cin: usize, cout: usize, h: usize, wd: usize, k: usize) {
    let pad = (k / 2) as isize;
    for img in 0..n {
        for co in 0..cout {
            let ob = (img * cout + co) * h * wd;
            for ci in 0..cin {
                let ib = (img * cin + ci) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((co * cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(dx, wd);
                        for y in 0..h {
                            let yi = y as isize + dy;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let orow = ob + y * wd;
                            let irow = ib + yi as usize * wd;
                            let src = &x[(irow as isize + x0 as isize + dx) as usize..(irow as isize + x1 as isize + dx) as usize];
                            axpy(wv, src, &mut out[orow + x0..orow + x1]);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(g: &[f64], w: &[f64], acc: &mut [f64], n: usize, cin: usize, cout: usize, h: usize, wd: usize, k: usize) {
    let pad = (k / 2) as isize;
    for img in 0..n {
        for co in 0..cout {
            let ob = (img * cout + co) * h * wd;
            for ci in 0..cin {
                let ib = (img * cin + ci) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((co * cin + ci) * k + ky) * k + kx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(dx, wd);
                        for y in 0..h {
                            let yi = y as isize + dy;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let orow = ob + y * wd;
                            let irow = ib + yi as usize * wd;
                            let dst_start = (irow as isize + x0 as isize + dx) as usize;
                            axpy(wv, &g[orow + x0..orow + x1], &mut acc[dst_start..dst_start + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(g: &[f64], x: &[f64], acc: &mut [f64], n: usize, cin: usize, cout: usize, h: usize, wd: usize, k: usize) {
    let pad = (k / 2) as isize;
    for img in 0..n {
        for co in 0..cout {
            let ob = (img * cout + co) * h * wd;
            for ci in 0..cin {
                let ib = (img * cin + ci) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(dx, wd);
                        let mut s = 0.0;
                        for y in 0..h {
                            let yi = y as isize + dy;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let orow = ob + y * wd;
                            let irow = ib + yi as usize * wd;
                            let src_start = (irow as isize + x0 as isize + dx) as usize;
                            s += dot(&g[orow + x0..orow + x1], &x[src_start..src_start + (x1 - x0)]);
                        }
                        acc[((co * cin + ci) * k + ky) * k + kx] += s;
                    }
                }
            }
        }
    }
}

/// Output columns `x0..x1` whose input column `x + dx` lies inside `0..w`.
fn valid_range(dx: isize, w: usize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    (x0.min(x1), x1)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn dims2(s: &[usize]) -> (usize, usize) {
    assert_eq!(s.len(), 2, "expected rank-2 tensor, got {s:?}");
    (s[0], s[1])
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected rank-3 tensor, got {s:?}");
    (s[0], s[1], s[2])
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}
