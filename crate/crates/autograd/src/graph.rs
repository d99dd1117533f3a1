//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with the
//! forward value. [`Graph::backward`] walks the tape in reverse and returns the
//! accumulated gradients of a scalar output.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::broadcast::{self, reduce_to};
use crate::kernels::conv::{self, Conv2dOpts};
use crate::kernels::linalg;
use crate::kernels::resample;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    Scale(f64),
    Shift(f64),
    Sigmoid,
    Relu,
    Gelu,
    Exp,
    Log,
    Sqrt,
    Square,
    Powf(f64),
    Clamp(f64, f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: usize, b: usize },
    Unary { kind: UnaryKind, a: usize },
    SumAll(usize),
    MeanAxes { a: usize, count: usize },
    MaxAxis { a: usize, argmax: Vec<usize> },
    Reshape(usize),
    Permute { a: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, opts: Conv2dOpts },
    DynConv { x: usize, k: usize },
    Upsample { x: usize, scale: usize },
    AdaptivePool { a: usize, axis: usize },
    Bmm { a: usize, b: usize, ta: bool, tb: bool },
    Softmax(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Create one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients returned by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when the output did not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A constant input (no gradient tracked).
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar output, got {:?}", out.value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::ones(out.value.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in local_grads(&nodes, node, &g)? {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn val(nodes: &[Node], id: usize) -> &Tensor {
    &nodes[id].value
}

fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Scale(s) => s,
        UnaryKind::Shift(_) => 1.0,
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Gelu => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Sqrt => 0.5 / y,
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Powf(p) => p * x.powf(p - 1.0),
        UnaryKind::Clamp(lo, hi) => {
            if (lo..=hi).contains(&x) {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn unary_apply(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Scale(s) => x * s,
        UnaryKind::Shift(s) => x + s,
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
        UnaryKind::Powf(p) => x.powf(p),
        UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
    }
}

fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let (ga, gb) = match kind {
                BinaryKind::Add => (g.clone(), g.clone()),
                BinaryKind::Sub => (g.clone(), g.scale(-1.0)),
                BinaryKind::Mul => (
                    broadcast::ternary_out(g, bv, av, |g, b, _| g * b),
                    broadcast::ternary_out(g, av, bv, |g, a, _| g * a),
                ),
                BinaryKind::Div => (
                    broadcast::ternary_out(g, bv, av, |g, b, _| g / b),
                    broadcast::ternary_out(g, av, bv, |g, a, b| -g * a / (b * b)),
                ),
            };
            vec![(*a, reduce_to(&ga, av.shape())), (*b, reduce_to(&gb, bv.shape()))]
        }
        Op::Unary { kind, a } => {
            let x = val(nodes, *a);
            let y = &node.value;
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| gv * unary_derivative(*kind, xv, yv))
                .collect();
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
        }
        Op::SumAll(a) => {
            let x = val(nodes, *a);
            vec![(*a, Tensor::full(x.shape(), g.item()))]
        }
        Op::MeanAxes { a, count } => {
            let x = val(nodes, *a);
            let gx = broadcast::broadcast_to(&g.scale(1.0 / *count as f64), x.shape())?;
            vec![(*a, gx)]
        }
        Op::MaxAxis { a, argmax } => {
            let x = val(nodes, *a);
            let mut gx = vec![0.0; x.numel()];
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                gx[src] += gv;
            }
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), gx))]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(nodes, *a).shape())?)],
        Op::Permute { a, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![(*a, g.permute(&inv)?)]
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            let mut v = Vec::with_capacity(parts.len());
            for &p in parts {
                let len = val(nodes, p).dim(*axis);
                v.push((p, g.narrow(*axis, start, len)?));
                start += len;
            }
            v
        }
        Op::Narrow { a, axis, start } => {
            let x = val(nodes, *a);
            let shape = x.shape();
            let outer = numel(&shape[..*axis]);
            let inner = numel(&shape[axis + 1..]);
            let (d, len) = (shape[*axis], g.dim(*axis));
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                let dst = (o * d + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*a, Tensor::from_parts(shape.to_vec(), gx))]
        }
        Op::Conv2d { x, w, b, opts } => {
            let need_x = nodes[*x].needs_grad;
            let need_w = nodes[*w].needs_grad;
            let need_b = b.map(|b| nodes[b].needs_grad).unwrap_or(false);
            let cg = conv::conv2d_backward(val(nodes, *x), val(nodes, *w), g, opts, need_x, need_w, need_b)?;
            let mut v = Vec::new();
            if let Some(gx) = cg.x {
                v.push((*x, gx));
            }
            if let Some(gw) = cg.w {
                v.push((*w, gw));
            }
            if let (Some(b), Some(gb)) = (b, cg.b) {
                v.push((*b, gb));
            }
            v
        }
        Op::DynConv { x, k } => {
            let (gx, gk) = conv::dynamic_conv_backward(val(nodes, *x), val(nodes, *k), g)?;
            vec![(*x, gx), (*k, gk)]
        }
        Op::Upsample { x, scale } => {
            vec![(*x, resample::upsample_bilinear_backward(val(nodes, *x).shape(), g, *scale))]
        }
        Op::AdaptivePool { a, axis } => {
            vec![(*a, resample::adaptive_avg_pool_axis_backward(val(nodes, *a).shape(), *axis, g))]
        }
        Op::Bmm { a, b, ta, tb } => {
            let (ga, gb) = linalg::bmm_backward(val(nodes, *a), val(nodes, *b), *ta, *tb, g)?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Softmax(a) => vec![(*a, linalg::softmax_last_backward(&node.value, g))],
    };
    Ok(out)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.graph.nodes.borrow()[self.id].value.dim(axis)
    }

    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::invalid("operands recorded on different graphs"))
        }
    }

    fn binary(self, other: Var<'g>, kind: BinaryKind) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let v = match kind {
            BinaryKind::Add => broadcast::binary(&a, &b, |x, y| x + y)?,
            BinaryKind::Sub => broadcast::binary(&a, &b, |x, y| x - y)?,
            BinaryKind::Mul => broadcast::binary(&a, &b, |x, y| x * y)?,
            BinaryKind::Div => broadcast::binary(&a, &b, |x, y| x / y)?,
        };
        let needs = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(v, Op::Binary { kind, a: self.id, b: other.id }, needs))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(self, kind: UnaryKind) -> Var<'g> {
        let v = self.value().map(|x| unary_apply(kind, x));
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(v, Op::Unary { kind, a: self.id }, needs)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.unary(UnaryKind::Scale(s))
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(UnaryKind::Scale(-1.0))
    }

    pub fn shift(self, s: f64) -> Var<'g> {
        self.unary(UnaryKind::Shift(s))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(UnaryKind::Relu)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'g> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(UnaryKind::Log)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(UnaryKind::Square)
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        self.unary(UnaryKind::Powf(p))
    }

    /// Clamp to `[lo, hi]`; gradient passes inside the closed interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(v, Op::SumAll(self.id), needs)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over `axes`, keeping them as size-1 dims.
    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::shape(format!("mean axes {axes:?} out of range for {shape:?}")));
        }
        let mut out_shape = shape.to_vec();
        for &a in axes {
            out_shape[a] = 1;
        }
        let count = numel(shape) / numel(&out_shape).max(1);
        let mut summed = reduce_to(&x, &out_shape);
        for v in summed.data_mut() {
            *v /= count as f64;
        }
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(summed, Op::MeanAxes { a: self.id, count }, needs))
    }

    /// Max over one axis, keeping it as a size-1 dim.
    pub fn max_axis(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("max axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let d = shape[axis];
        let mut vals = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..d {
                for i in 0..inner {
                    let src = (o * d + k) * inner + i;
                    let v = x.data()[src];
                    if v > vals[o * inner + i] {
                        vals[o * inner + i] = v;
                        arg[o * inner + i] = src;
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(Tensor::from_parts(out_shape, vals), Op::MaxAxis { a: self.id, argmax: arg }, needs))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(v, Op::Reshape(self.id), needs))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let v = self.value().permute(perm)?;
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(v, Op::Permute { a: self.id, perm: perm.to_vec() }, needs))
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero vars"))?;
        for p in parts {
            first.same_graph(p)?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = first.graph.needs(&ids);
        Ok(first.graph.push(v, Op::Concat { parts: ids, axis }, needs))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let v = self.value().narrow(axis, start, len)?;
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(v, Op::Narrow { a: self.id, axis, start }, needs))
    }

    /// Split into `n` equal chunks along `axis`.
    pub fn chunk(self, n: usize, axis: usize) -> Result<Vec<Var<'g>>> {
        let d = self.dim(axis);
        if n == 0 || !d.is_multiple_of(n) {
            return Err(Error::shape(format!("cannot split {d} into {n} equal chunks")));
        }
        (0..n).map(|i| self.narrow(axis, i * d / n, d / n)).collect()
    }

    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, opts: Conv2dOpts) -> Result<Var<'g>> {
        self.same_graph(&weight)?;
        if let Some(b) = &bias {
            self.same_graph(b)?;
        }
        let bval = bias.map(|b| b.value());
        let v = conv::conv2d_forward(&self.value(), &weight.value(), bval.as_deref(), &opts)?;
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let needs = self.graph.needs(&ids);
        Ok(self.graph.push(v, Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), opts }, needs))
    }

    /// Grouped per-sample convolution with kernels `(M, J, K, K)`; see
    /// [`conv::dynamic_conv_forward`].
    pub fn dynamic_conv(self, kernels: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&kernels)?;
        let v = conv::dynamic_conv_forward(&self.value(), &kernels.value())?;
        let needs = self.graph.needs(&[self.id, kernels.id]);
        Ok(self.graph.push(v, Op::DynConv { x: self.id, k: kernels.id }, needs))
    }

    pub fn upsample_bilinear(self, scale: usize) -> Result<Var<'g>> {
        let v = resample::upsample_bilinear_forward(&self.value(), scale)?;
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(v, Op::Upsample { x: self.id, scale }, needs))
    }

    pub fn adaptive_avg_pool_axis(self, axis: usize, bins: usize) -> Result<Var<'g>> {
        let v = resample::adaptive_avg_pool_axis(&self.value(), axis, bins)?;
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(v, Op::AdaptivePool { a: self.id, axis }, needs))
    }

    /// Adaptive average pooling of the two trailing axes of an `(N, C, H, W)` tensor.
    pub fn adaptive_avg_pool2d(self, oh: usize, ow: usize) -> Result<Var<'g>> {
        self.adaptive_avg_pool_axis(2, oh)?.adaptive_avg_pool_axis(3, ow)
    }

    /// Batched `op(self) · op(other)` for rank-3 operands.
    pub fn bmm(self, other: Var<'g>, transpose_self: bool, transpose_other: bool) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let v = linalg::bmm(&self.value(), &other.value(), transpose_self, transpose_other)?;
        let needs = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(v, Op::Bmm { a: self.id, b: other.id, ta: transpose_self, tb: transpose_other }, needs))
    }

    pub fn softmax_last(self) -> Var<'g> {
        let v = linalg::softmax_last(&self.value());
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(v, Op::Softmax(self.id), needs)
    }
}
