//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in forward
//! order. [`Graph::backward`] walks the tape once in reverse, accumulating
//! gradients additively over fan-out. A graph can be differentiated only
//! once; record a new graph for another pass.
//!
//! ```
//! use avsk::autodiff::Graph;
//! use avsk::Tensor;
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Ref, RefCell};

use crate::alloc::Buffer;
use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dGeom, Padding};
use crate::tensor::{DType, Tensor};

type Id = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, f64),
    AddBias(Id, Id),
    Matmul(Id, Id),
    Transpose(Id),
    Sigmoid(Id),
    Tanh(Id),
    Swish(Id),
    Relu(Id),
    Softmax(Id),
    LogSoftmax(Id),
    LayerNorm {
        x: Id,
        gain: Id,
        bias: Id,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Id),
    Reshape(Id),
    ConcatCols(Vec<Id>),
    SliceCols(Id, usize),
    ConcatRows(Vec<Id>),
    GatherRows(Id, Vec<usize>),
    TileCols(Id, usize),
    DwConv1d(Id, Id),
    Conv2d(Id, Id, Conv2dGeom),
    MaxPool2 { x: Id, argmax: Vec<usize> },
    MeanMid { x: Id, mid: usize },
    Glu(Id),
    JointAdd(Id, Id),
    ScaleRows(Id, Id),
    SumCols(Id),
    Pick(Id, Vec<usize>),
    /// Scalar output whose gradient with respect to the input was computed
    /// alongside the value.
    ScalarWithGrad(Id, Vec<f64>),
}

impl Op {
    fn inputs(&self) -> Vec<Id> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | Matmul(a, b) | DwConv1d(a, b)
            | Conv2d(a, b, _) | JointAdd(a, b) | ScaleRows(a, b) => vec![*a, *b],
            Scale(a, _) | Transpose(a) | Sigmoid(a) | Tanh(a) | Swish(a) | Relu(a) | Softmax(a)
            | LogSoftmax(a) | Sum(a) | Reshape(a) | SliceCols(a, _) | GatherRows(a, _)
            | TileCols(a, _) | Glu(a) | SumCols(a) | Pick(a, _) | ScalarWithGrad(a, _) => vec![*a],
            MaxPool2 { x, .. } | MeanMid { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatCols(ids) | ConcatRows(ids) => ids.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward (and at most one backward) pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    dtype: DType,
    record: bool,
    consumed: RefCell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Graph {
    /// An f64 graph that records for backward.
    pub fn new() -> Self {
        Self::with_dtype(DType::F64)
    }

    pub fn with_dtype(dtype: DType) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            dtype,
            record: true,
            consumed: RefCell::new(false),
        }
    }

    /// A graph that evaluates without keeping backward state.
    pub fn inference(dtype: DType) -> Self {
        Graph {
            record: false,
            ..Self::with_dtype(dtype)
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t, self.record)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t, false)
    }

    fn push_leaf(&self, mut t: Tensor, requires_grad: bool) -> Var<'_> {
        t.requires_grad = requires_grad;
        if self.dtype == DType::F32 && t.dtype() != DType::F32 {
            t.data_mut().iter_mut().for_each(|v| *v = DType::F32.round(*v));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, shape: Vec<usize>, mut data: Buffer, op: Op) -> Var<'_> {
        if self.dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = DType::F32.round(*v));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.record && op.inputs().iter().any(|&i| nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Tensor::from_buffer(shape, data, self.dtype),
            op,
            requires_grad,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new one".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(gy);
                continue;
            }
            backprop(&nodes, node, &gy, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.requires_grad => {
                    Tensor::with_dtype(n.value.shape(), g, DType::F64).map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: Id, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let val = |id: Id| &nodes[id].value;
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(grads, nodes, *a, |g| add_into(g, gy));
            accum(grads, nodes, *b, |g| add_into(g, gy));
        }
        Op::Sub(a, b) => {
            accum(grads, nodes, *a, |g| add_into(g, gy));
            accum(grads, nodes, *b, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accum(grads, nodes, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * bv[i];
                }
            });
            accum(grads, nodes, *b, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * av[i];
                }
            });
        }
        Op::Scale(a, s) => accum(grads, nodes, *a, |g| {
            g.iter_mut().zip(gy).for_each(|(g, d)| *g += s * d)
        }),
        Op::AddBias(x, b) => {
            accum(grads, nodes, *x, |g| add_into(g, gy));
            let d = val(*b).len();
            accum(grads, nodes, *b, |g| {
                for row in gy.chunks_exact(d) {
                    add_into(g, row);
                }
            });
        }
        Op::Matmul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            accum(grads, nodes, *a, |g| kernels::matmul_nt_acc(gy, bt.data(), m, n, k, g));
            accum(grads, nodes, *b, |g| kernels::matmul_tn_acc(at.data(), gy, m, k, n, g));
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            accum(grads, nodes, *a, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += gy[j * r + i];
                    }
                }
            });
        }
        Op::Sigmoid(a) => accum(grads, nodes, *a, |g| {
            for i in 0..g.len() {
                g[i] += gy[i] * y[i] * (1.0 - y[i]);
            }
        }),
        Op::Tanh(a) => accum(grads, nodes, *a, |g| {
            for i in 0..g.len() {
                g[i] += gy[i] * (1.0 - y[i] * y[i]);
            }
        }),
        Op::Swish(a) => {
            let x = val(*a).data();
            accum(grads, nodes, *a, |g| {
                for i in 0..g.len() {
                    let s = kernels::sigmoid(x[i]);
                    g[i] += gy[i] * (s + x[i] * s * (1.0 - s));
                }
            });
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            accum(grads, nodes, *a, |g| {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        g[i] += gy[i];
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let c = node.value.cols();
            accum(grads, nodes, *a, |g| {
                for ((gr, yr), gyr) in g.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(gy.chunks_exact(c)) {
                    let s = kernels::dot(yr, gyr);
                    for j in 0..c {
                        gr[j] += yr[j] * (gyr[j] - s);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let c = node.value.cols();
            accum(grads, nodes, *a, |g| {
                for ((gr, yr), gyr) in g.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(gy.chunks_exact(c)) {
                    let s: f64 = gyr.iter().sum();
                    for j in 0..c {
                        gr[j] += gyr[j] - yr[j].exp() * s;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = val(*x).data();
            let gv = val(*gain).data();
            let d = gv.len();
            let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
            accum(grads, nodes, *x, |g| {
                let mut dxhat = vec![0.0; d];
                for r in 0..mean.len() {
                    let gyr = &gy[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dxhat[j] = gyr[j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat(r, j);
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        g[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat(r, j) * m2);
                    }
                }
            });
            accum(grads, nodes, *gain, |g| {
                for r in 0..mean.len() {
                    for j in 0..d {
                        g[j] += gy[r * d + j] * xhat(r, j);
                    }
                }
            });
            accum(grads, nodes, *bias, |g| {
                for row in gy.chunks_exact(d) {
                    add_into(g, row);
                }
            });
        }
        Op::Sum(a) => accum(grads, nodes, *a, |g| g.iter_mut().for_each(|v| *v += gy[0])),
        Op::Reshape(a) => accum(grads, nodes, *a, |g| add_into(g, gy)),
        Op::ConcatCols(ids) => {
            let c = node.value.cols();
            let mut off = 0;
            for &id in ids {
                let ci = val(id).cols();
                accum(grads, nodes, id, |g| {
                    for (gr, gyr) in g.chunks_exact_mut(ci).zip(gy.chunks_exact(c)) {
                        add_into(gr, &gyr[off..off + ci]);
                    }
                });
                off += ci;
            }
        }
        Op::SliceCols(a, start) => {
            let c = val(*a).cols();
            let w = node.value.cols();
            accum(grads, nodes, *a, |g| {
                for (gr, gyr) in g.chunks_exact_mut(c).zip(gy.chunks_exact(w)) {
                    add_into(&mut gr[*start..start + w], gyr);
                }
            });
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            for &id in ids {
                let n = val(id).len();
                accum(grads, nodes, id, |g| add_into(g, &gy[off..off + n]));
                off += n;
            }
        }
        Op::GatherRows(a, idx) => {
            let c = node.value.cols();
            accum(grads, nodes, *a, |g| {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut g[src * c..(src + 1) * c], &gy[r * c..(r + 1) * c]);
                }
            });
        }
        Op::TileCols(a, reps) => {
            let c = val(*a).cols();
            accum(grads, nodes, *a, |g| {
                for (gr, gyr) in g.chunks_exact_mut(c).zip(gy.chunks_exact(c * reps)) {
                    for chunk in gyr.chunks_exact(c) {
                        add_into(gr, chunk);
                    }
                }
            });
        }
        Op::DwConv1d(x, k) => {
            let (xt, kt) = (val(*x), val(*k));
            let (t, d, kk) = (xt.shape()[0], xt.shape()[1], kt.shape()[0]);
            let pad = (kk - 1) / 2;
            let (xv, kv) = (xt.data(), kt.data());
            let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                for ti in 0..t {
                    for ki in 0..kk {
                        let src = ti as isize + ki as isize - pad as isize;
                        if src >= 0 && src < t as isize {
                            f(ti, ki, src as usize);
                        }
                    }
                }
            };
            accum(grads, nodes, *x, |g| {
                taps(&mut |ti, ki, src| {
                    for j in 0..d {
                        g[src * d + j] += gy[ti * d + j] * kv[ki * d + j];
                    }
                })
            });
            accum(grads, nodes, *k, |g| {
                taps(&mut |ti, ki, src| {
                    for j in 0..d {
                        g[ki * d + j] += gy[ti * d + j] * xv[src * d + j];
                    }
                })
            });
        }
        Op::Conv2d(x, k, geom) => {
            let (xt, kt) = (val(*x), val(*k));
            let mut gx = vec![0.0; xt.len()];
            let mut gk = vec![0.0; kt.len()];
            geom.backward(xt.data(), kt.data(), gy, &mut gx, &mut gk);
            accum(grads, nodes, *x, |g| add_into(g, &gx));
            accum(grads, nodes, *k, |g| add_into(g, &gk));
        }
        Op::MaxPool2 { x, argmax } => accum(grads, nodes, *x, |g| {
            for (o, &src) in argmax.iter().enumerate() {
                g[src] += gy[o];
            }
        }),
        Op::MeanMid { x, mid } => {
            let c = node.value.cols();
            let inv = 1.0 / *mid as f64;
            accum(grads, nodes, *x, |g| {
                for (a, gyr) in gy.chunks_exact(c).enumerate() {
                    for m in 0..*mid {
                        let base = (a * mid + m) * c;
                        for j in 0..c {
                            g[base + j] += gyr[j] * inv;
                        }
                    }
                }
            });
        }
        Op::Glu(a) => {
            let x = val(*a).data();
            let h = node.value.cols();
            accum(grads, nodes, *a, |g| {
                for r in 0..node.value.rows() {
                    for j in 0..h {
                        let xa = x[r * 2 * h + j];
                        let s = kernels::sigmoid(x[r * 2 * h + h + j]);
                        let d = gy[r * h + j];
                        g[r * 2 * h + j] += d * s;
                        g[r * 2 * h + h + j] += d * xa * s * (1.0 - s);
                    }
                }
            });
        }
        Op::JointAdd(e, p) => {
            let (t, u1) = (val(*e).rows(), val(*p).rows());
            let h = node.value.cols();
            accum(grads, nodes, *e, |g| {
                for ti in 0..t {
                    for ui in 0..u1 {
                        add_into(&mut g[ti * h..(ti + 1) * h], &gy[(ti * u1 + ui) * h..(ti * u1 + ui + 1) * h]);
                    }
                }
            });
            accum(grads, nodes, *p, |g| {
                for ti in 0..t {
                    for ui in 0..u1 {
                        add_into(&mut g[ui * h..(ui + 1) * h], &gy[(ti * u1 + ui) * h..(ti * u1 + ui + 1) * h]);
                    }
                }
            });
        }
        Op::ScaleRows(x, s) => {
            let (xv, sv) = (val(*x).data(), val(*s).data());
            let c = val(*x).cols();
            accum(grads, nodes, *x, |g| {
                for r in 0..sv.len() {
                    for j in 0..c {
                        g[r * c + j] += gy[r * c + j] * sv[r];
                    }
                }
            });
            accum(grads, nodes, *s, |g| {
                for r in 0..sv.len() {
                    g[r] += kernels::dot(&gy[r * c..(r + 1) * c], &xv[r * c..(r + 1) * c]);
                }
            });
        }
        Op::SumCols(a) => {
            let c = val(*a).cols();
            accum(grads, nodes, *a, |g| {
                for (r, gr) in g.chunks_exact_mut(c).enumerate() {
                    gr.iter_mut().for_each(|v| *v += gy[r]);
                }
            });
        }
        Op::Pick(a, idx) => {
            let c = val(*a).cols();
            accum(grads, nodes, *a, |g| {
                for (r, &j) in idx.iter().enumerate() {
                    g[r * c + j] += gy[r];
                }
            });
        }
        Op::ScalarWithGrad(a, dg) => accum(grads, nodes, *a, |g| {
            g.iter_mut().zip(dg).for_each(|(g, d)| *g += gy[0] * d)
        }),
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn map_unary(v: &Tensor, f: impl Fn(f64) -> f64) -> Result<Buffer> {
    Buffer::new(v.data().iter().map(|&x| f(x)).collect())
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.g.value(*self)
    }

    /// Copies the current value out of the graph.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let v = self.value();
        Tensor::with_dtype(v.shape(), v.data().to_vec(), v.dtype())
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn binary_same(self, other: Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Buffer> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        Buffer::new(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let data = self.binary_same(other, "add", |a, b| a + b)?;
        Ok(self.g.push(self.shape(), data, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let data = self.binary_same(other, "sub", |a, b| a - b)?;
        Ok(self.g.push(self.shape(), data, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let data = self.binary_same(other, "mul", |a, b| a * b)?;
        Ok(self.g.push(self.shape(), data, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        let data = map_unary(&self.value(), |x| x * s)?;
        Ok(self.g.push(self.shape(), data, Op::Scale(self.id, s)))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let data = {
            let (x, b) = (self.value(), bias.value());
            if b.len() != x.cols() {
                return Err(Error::shape("add_bias", x.shape(), b.shape()));
            }
            let mut out = Buffer::new(x.data().to_vec())?;
            for row in out.chunks_exact_mut(b.len()) {
                add_into(row, b.data());
            }
            out
        };
        Ok(self.g.push(self.shape(), data, Op::AddBias(self.id, bias.id)))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (data, shape) = {
            let (a, b) = (self.value(), other.value());
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = Buffer::zeros(m * n)?;
            kernels::matmul(a.data(), b.data(), m, k, n, &mut out);
            (out, vec![m, n])
        };
        Ok(self.g.push(shape, data, Op::Matmul(self.id, other.id)))
    }

    /// `self · w + b`, for `self: [n×in]`, `w: [in×out]`.
    pub fn linear(self, w: Var<'g>, b: Option<Var<'g>>) -> Result<Var<'g>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let (data, shape) = {
            let a = self.value();
            if a.shape().len() != 2 {
                return Err(Error::shape("transpose", a.shape(), &[]));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = Buffer::zeros(r * c)?;
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            (out, vec![c, r])
        };
        Ok(self.g.push(shape, data, Op::Transpose(self.id)))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        let data = map_unary(&self.value(), kernels::sigmoid)?;
        Ok(self.g.push(self.shape(), data, Op::Sigmoid(self.id)))
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        let data = map_unary(&self.value(), f64::tanh)?;
        Ok(self.g.push(self.shape(), data, Op::Tanh(self.id)))
    }

    /// `x · sigmoid(x)`
    pub fn swish(self) -> Result<Var<'g>> {
        let data = map_unary(&self.value(), kernels::swish)?;
        Ok(self.g.push(self.shape(), data, Op::Swish(self.id)))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        let data = map_unary(&self.value(), |x| x.max(0.0))?;
        Ok(self.g.push(self.shape(), data, Op::Relu(self.id)))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g>> {
        let data = {
            let x = self.value();
            let mut out = Buffer::zeros(x.len())?;
            kernels::softmax_rows(x.data(), x.cols(), &mut out);
            out
        };
        Ok(self.g.push(self.shape(), data, Op::Softmax(self.id)))
    }

    pub fn log_softmax(self) -> Result<Var<'g>> {
        let data = {
            let x = self.value();
            let mut out = Buffer::zeros(x.len())?;
            kernels::log_softmax_rows(x.data(), x.cols(), &mut out);
            out
        };
        Ok(self.g.push(self.shape(), data, Op::LogSoftmax(self.id)))
    }

    /// Normalizes over the last axis, then scales by `gain` and shifts by `bias`.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (data, mean, rstd) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            let d = x.cols();
            if d == 0 {
                return Err(Error::Contract("layer_norm over an empty axis".into()));
            }
            if gv.len() != d || bv.len() != d {
                return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
            }
            let mut out = Buffer::zeros(x.len())?;
            let (mean, rstd) =
                kernels::layer_norm_rows(x.data(), d, gv.data(), bv.data(), eps, &mut out);
            (out, mean, rstd)
        };
        Ok(self.g.push(
            self.shape(),
            data,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                rstd,
            },
        ))
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let s: f64 = self.value().data().iter().sum();
        Ok(self.g.push(vec![1], Buffer::new(vec![s])?, Op::Sum(self.id)))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let data = {
            let x = self.value();
            if shape.iter().product::<usize>() != x.len() {
                return Err(Error::shape("reshape", x.shape(), shape));
            }
            Buffer::new(x.data().to_vec())?
        };
        Ok(self.g.push(shape.to_vec(), data, Op::Reshape(self.id)))
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let g = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?
            .g;
        let (data, shape) = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let rows = vals[0].rows();
            if let Some(bad) = vals.iter().find(|v| v.rows() != rows) {
                return Err(Error::shape("concat_cols", vals[0].shape(), bad.shape()));
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Buffer::zeros(rows * total)?;
            for r in 0..rows {
                let mut off = 0;
                for v in &vals {
                    let c = v.cols();
                    out[r * total + off..r * total + off + c].copy_from_slice(v.row(r));
                    off += c;
                }
            }
            let mut shape = vals[0].shape().to_vec();
            *shape.last_mut().unwrap() = total;
            (out, shape)
        };
        Ok(g.push(shape, data, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>> {
        let (data, shape) = {
            let x = self.value();
            let c = x.cols();
            if start >= end || end > c {
                return Err(Error::shape("slice_cols", x.shape(), &[start, end]));
            }
            let w = end - start;
            let mut out = Vec::with_capacity(x.rows() * w);
            for r in 0..x.rows() {
                out.extend_from_slice(&x.row(r)[start..end]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = w;
            (Buffer::new(out)?, shape)
        };
        Ok(self.g.push(shape, data, Op::SliceCols(self.id, start)))
    }

    /// Stacks along the first axis; trailing extents must agree.
    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let g = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?
            .g;
        let (data, shape) = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let tail = &vals[0].shape()[1..];
            let mut lead = 0;
            let mut out = Vec::new();
            for v in &vals {
                if &v.shape()[1..] != tail {
                    return Err(Error::shape("concat_rows", vals[0].shape(), v.shape()));
                }
                lead += v.shape()[0];
                out.extend_from_slice(v.data());
            }
            let mut shape = vec![lead];
            shape.extend_from_slice(tail);
            (Buffer::new(out)?, shape)
        };
        Ok(g.push(shape, data, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Selects rows (over the flattened leading axes) by index.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        let (data, c) = {
            let x = self.value();
            let (r, c) = (x.rows(), x.cols());
            if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
                return Err(Error::shape("gather_rows", x.shape(), &[bad]));
            }
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(x.row(i));
            }
            (Buffer::new(out)?, c)
        };
        Ok(self.g.push(vec![idx.len(), c], data, Op::GatherRows(self.id, idx.to_vec())))
    }

    /// Repeats the last axis `reps` times: `[r×c] → [r×(c·reps)]`.
    pub fn tile_cols(self, reps: usize) -> Result<Var<'g>> {
        let (data, shape) = {
            let x = self.value();
            let c = x.cols();
            let mut out = Vec::with_capacity(x.len() * reps);
            for r in 0..x.rows() {
                for _ in 0..reps {
                    out.extend_from_slice(x.row(r));
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = c * reps;
            (Buffer::new(out)?, shape)
        };
        Ok(self.g.push(shape, data, Op::TileCols(self.id, reps)))
    }

    /// Depthwise temporal convolution with same padding: `x: [T×D]`, `kernel: [K×D]`.
    pub fn depthwise_conv1d(self, kernel: Var<'g>) -> Result<Var<'g>> {
        let data = {
            let (x, k) = (self.value(), kernel.value());
            if x.shape().len() != 2 || k.shape().len() != 2 || x.shape()[1] != k.shape()[1] {
                return Err(Error::shape("depthwise_conv1d", x.shape(), k.shape()));
            }
            kernels::check_odd_kernel(k.shape()[0])?;
            let (t, d) = (x.shape()[0], x.shape()[1]);
            let mut out = Buffer::zeros(t * d)?;
            kernels::depthwise_conv1d(x.data(), k.data(), t, d, k.shape()[0], &mut out);
            out
        };
        Ok(self.g.push(self.shape(), data, Op::DwConv1d(self.id, kernel.id)))
    }

    /// 2-D cross-correlation. `self: [N×H×W×Cin]` or `[H×W×Cin]`,
    /// `kernel: [Kh×Kw×Cin×Cout]`.
    pub fn conv2d(self, kernel: Var<'g>, stride: usize, padding: Padding) -> Result<Var<'g>> {
        let (data, shape, geom) = {
            let (x, k) = (self.value(), kernel.value());
            let xs = match *x.shape() {
                [h, w, c] => [1, h, w, c],
                [n, h, w, c] => [n, h, w, c],
                _ => return Err(Error::shape("conv2d", x.shape(), k.shape())),
            };
            let ks: [usize; 4] = k
                .shape()
                .try_into()
                .map_err(|_| Error::shape("conv2d", x.shape(), k.shape()))?;
            let geom = Conv2dGeom::new(xs, ks, stride, padding)?;
            let mut out = Buffer::zeros(geom.n * geom.oh * geom.ow * geom.cout)?;
            geom.forward(x.data(), k.data(), &mut out);
            let shape = if x.shape().len() == 3 {
                vec![geom.oh, geom.ow, geom.cout]
            } else {
                vec![geom.n, geom.oh, geom.ow, geom.cout]
            };
            (out, shape, geom)
        };
        Ok(self.g.push(shape, data, Op::Conv2d(self.id, kernel.id, geom)))
    }

    /// 2×2 max pooling with stride 2 over `[N×H×W×C]`; odd trailing rows/cols are dropped.
    pub fn max_pool2(self) -> Result<Var<'g>> {
        let (data, shape, argmax) = {
            let x = self.value();
            let [n, h, w, c] = *x.shape() else {
                return Err(Error::shape("max_pool2", x.shape(), &[]));
            };
            if h < 2 || w < 2 {
                return Err(Error::shape("max_pool2", x.shape(), &[2, 2]));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Buffer::zeros(n * oh * ow * c)?;
            let mut argmax = vec![0; out.len()];
            let xv = x.data();
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let o = ((b * oh + oy) * ow + ox) * c + ch;
                            let mut best = f64::NEG_INFINITY;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if xv[i] > best {
                                    best = xv[i];
                                    argmax[o] = i;
                                }
                            }
                            out[o] = best;
                        }
                    }
                }
            }
            (out, vec![n, oh, ow, c], argmax)
        };
        Ok(self.g.push(shape, data, Op::MaxPool2 { x: self.id, argmax }))
    }

    /// Mean over the middle axis of `[A×M×C]`, giving `[A×C]`.
    pub fn mean_mid(self, a: usize, mid: usize) -> Result<Var<'g>> {
        let (data, c) = {
            let x = self.value();
            let c = x.cols();
            if a * mid * c != x.len() {
                return Err(Error::shape("mean_mid", x.shape(), &[a, mid, c]));
            }
            let mut out = Buffer::zeros(a * c)?;
            for i in 0..a {
                for m in 0..mid {
                    let base = (i * mid + m) * c;
                    add_into(&mut out[i * c..(i + 1) * c], &x.data()[base..base + c]);
                }
            }
            out.iter_mut().for_each(|v| *v /= mid as f64);
            (out, c)
        };
        Ok(self.g.push(vec![a, c], data, Op::MeanMid { x: self.id, mid }))
    }

    /// Gated linear unit over the last axis: first half times sigmoid of second half.
    pub fn glu(self) -> Result<Var<'g>> {
        let (data, shape) = {
            let x = self.value();
            let c = x.cols();
            if c % 2 != 0 {
                return Err(Error::shape("glu", x.shape(), &[]));
            }
            let h = c / 2;
            let mut out = Vec::with_capacity(x.len() / 2);
            for r in 0..x.rows() {
                let row = x.row(r);
                for j in 0..h {
                    out.push(row[j] * kernels::sigmoid(row[h + j]));
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = h;
            (Buffer::new(out)?, shape)
        };
        Ok(self.g.push(shape, data, Op::Glu(self.id)))
    }

    /// Outer sum of `enc: [T×H]` and `pred: [U×H]` into `[(T·U)×H]`, row `t·U + u`.
    pub fn joint_add(self, pred: Var<'g>) -> Result<Var<'g>> {
        let (data, shape) = {
            let (e, p) = (self.value(), pred.value());
            if e.cols() != p.cols() {
                return Err(Error::shape("joint_add", e.shape(), p.shape()));
            }
            let (t, u, h) = (e.rows(), p.rows(), e.cols());
            let mut out = Buffer::zeros(t * u * h)?;
            for ti in 0..t {
                for ui in 0..u {
                    let o = &mut out[(ti * u + ui) * h..(ti * u + ui + 1) * h];
                    for j in 0..h {
                        o[j] = e.row(ti)[j] + p.row(ui)[j];
                    }
                }
            }
            (out, vec![t * u, h])
        };
        Ok(self.g.push(shape, data, Op::JointAdd(self.id, pred.id)))
    }

    /// Multiplies row `r` of `self` by `scales[r]`; `scales` has one entry per row.
    pub fn scale_rows(self, scales: Var<'g>) -> Result<Var<'g>> {
        let data = {
            let (x, s) = (self.value(), scales.value());
            if s.len() != x.rows() {
                return Err(Error::shape("scale_rows", x.shape(), s.shape()));
            }
            let c = x.cols();
            let mut out = Buffer::new(x.data().to_vec())?;
            for (r, row) in out.chunks_exact_mut(c).enumerate() {
                row.iter_mut().for_each(|v| *v *= s.data()[r]);
            }
            out
        };
        Ok(self.g.push(self.shape(), data, Op::ScaleRows(self.id, scales.id)))
    }

    /// Row sums: `[R×C] → [R×1]`.
    pub fn sum_cols(self) -> Result<Var<'g>> {
        let (data, r) = {
            let x = self.value();
            let out: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
            let r = out.len();
            (Buffer::new(out)?, r)
        };
        Ok(self.g.push(vec![r, 1], data, Op::SumCols(self.id)))
    }

    /// One entry per row: `out[r] = self[r, idx[r]]`.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'g>> {
        let data = {
            let x = self.value();
            if idx.len() != x.rows() || idx.iter().any(|&j| j >= x.cols()) {
                return Err(Error::shape("pick", x.shape(), &[idx.len()]));
            }
            Buffer::new(idx.iter().enumerate().map(|(r, &j)| x.row(r)[j]).collect())?
        };
        Ok(self.g.push(vec![idx.len()], data, Op::Pick(self.id, idx.to_vec())))
    }

    /// Records a scalar computed outside the graph together with its
    /// gradient with respect to `self`.
    pub fn scalar_with_grad(self, value: f64, grad: Vec<f64>) -> Result<Var<'g>> {
        if grad.len() != self.value().len() {
            return Err(Error::shape("scalar_with_grad", &self.shape(), &[grad.len()]));
        }
        Ok(self.g.push(vec![1], Buffer::new(vec![value])?, Op::ScalarWithGrad(self.id, grad)))
    }

    /// Multiplies by a fixed 0/1 mask scaled by `1/(1−p)` (inverted dropout).
    pub fn dropout<R: rand::Rng + ?Sized>(self, p: f64, rng: &mut R) -> Result<Var<'g>> {
        if p <= 0.0 {
            return Ok(self);
        }
        let keep = 1.0 - p;
        let n = self.value().len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.g.constant(Tensor::new(&self.shape(), mask)?);
        self.mul(m)
    }
}

/// Maximum relative disagreement between analytic and numeric gradients:
/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Central-difference gradient check of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), h)
}

/// Gradient check over several inputs at once; returns the worst relative
/// error across all coordinates of all inputs.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("step {h} outside [1e-8, 1e-3]")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::inference(DType::F64);
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&g, &vars)?;
        if y.value().len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(y.item())
    };
    let g = Graph::new();
    let vars: Vec<_> = xs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&g, &vars)?;
    if y.value().len() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    let grads = g.backward(y)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = match grads.get(*v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; xs[i].len()],
        };
        let mut numeric = vec![0.0; xs[i].len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = xs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *num = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
