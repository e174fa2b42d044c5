//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Nodes are reference counted. Every node records its parents and the
//! operation that produced it; a node id is assigned from a per-tape counter
//! so creation order is a valid topological order. `backward` walks the
//! sub-graph reachable from the loss, accumulates gradients in decreasing id
//! order and then releases every interior node that is not protected by a
//! retention root. Released nodes keep their value but lose their parents,
//! so a later backward pass that reaches them fails instead of silently
//! dropping gradient paths.
//!
//! The delayed weight update relies on the retention rules: a fragment
//! `W^{t+1} = W^t - lr * pi(f(grad, W))` is built after iteration `t` and is
//! consumed by the backward pass of iteration `t + 1`.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, col2im, im2col, ConvGeom, Tensor};

/// Storage precision for recorded values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Full double precision; used for gradient checks.
    F64,
    /// Every recorded value and gradient is rounded through `f32`.
    F32,
}

struct TapeInner {
    next_id: Cell<u64>,
    precision: Precision,
    check_finite: bool,
    live: Cell<usize>,
    peak: Cell<usize>,
}

/// Recording context. Cheap to clone; clones share the id counter.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("precision", &self.inner.precision)
            .field("recorded", &self.inner.next_id.get())
            .field("live", &self.inner.live.get())
            .finish()
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self::with_finite_check(precision, cfg!(debug_assertions))
    }

    /// `check_finite` makes every recording op fail on NaN/Inf output.
    pub fn with_finite_check(precision: Precision, check_finite: bool) -> Self {
        Self {
            inner: Rc::new(TapeInner {
                next_id: Cell::new(0),
                precision,
                check_finite,
                live: Cell::new(0),
                peak: Cell::new(0),
            }),
        }
    }

    pub fn precision(&self) -> Precision {
        self.inner.precision
    }

    /// Number of nodes currently alive.
    pub fn live_nodes(&self) -> usize {
        self.inner.live.get()
    }

    /// Highest value of [`Tape::live_nodes`] since the last reset.
    pub fn peak_live_nodes(&self) -> usize {
        self.inner.peak.get()
    }

    pub fn reset_peak(&self) {
        self.inner.peak.set(self.inner.live.get());
    }

    /// Number of nodes ever recorded.
    pub fn recorded(&self) -> u64 {
        self.inner.next_id.get()
    }

    /// Trainable leaf.
    pub fn leaf(&self, mut value: Tensor) -> Var {
        if self.inner.precision == Precision::F32 {
            value.round_f32();
        }
        self.push(value, Op::Leaf, Vec::new(), NodeKind::Leaf)
    }

    /// Leaf whose value is a constant input (data, labels, detached tensors).
    pub fn constant(&self, mut value: Tensor) -> Var {
        if self.inner.precision == Precision::F32 {
            value.round_f32();
        }
        self.push(value, Op::Leaf, Vec::new(), NodeKind::Detached)
    }

    /// New leaf carrying `node`'s value and flagged detached; no gradient
    /// flows past it.
    pub fn detach(&self, node: &Var) -> Var {
        self.push(node.value().clone(), Op::Leaf, Vec::new(), NodeKind::Detached)
    }

    /// Fresh trainable leaf with a bitwise copy of `node`'s value. Once the
    /// caller drops its handles to `node`, the old sub-graph is released.
    pub fn rebase_leaf(&self, node: &Var) -> Var {
        self.push(node.value().clone(), Op::Leaf, Vec::new(), NodeKind::Leaf)
    }

    fn push(&self, value: Tensor, op: Op, parents: Vec<Var>, kind: NodeKind) -> Var {
        let id = self.inner.next_id.get();
        self.inner.next_id.set(id + 1);
        let live = self.inner.live.get() + 1;
        self.inner.live.set(live);
        if live > self.inner.peak.get() {
            self.inner.peak.set(live);
        }
        Var(Rc::new(Node {
            id,
            value,
            op,
            parents: RefCell::new(parents),
            kind,
            freed: Cell::new(false),
            tape: Rc::clone(&self.inner),
        }))
    }

    fn record(&self, op: Op, parents: Vec<Var>, mut value: Tensor) -> Result<Var> {
        if self.inner.precision == Precision::F32 {
            value.round_f32();
        }
        if self.inner.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push(value, op, parents, NodeKind::Interior))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NodeKind {
    Leaf,
    Detached,
    Interior,
}

type GradFn = Rc<dyn Fn(&Tensor) -> Tensor>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    AddChannel,
    Scale(f64),
    AddScalar,
    Relu,
    Tanh,
    Sigmoid,
    Sqrt,
    Square,
    MatMul,
    Transpose,
    Reshape,
    ConcatCols,
    SliceCols { start: usize, end: usize },
    Conv2d { stride: usize, pad: usize },
    MeanSpatial,
    ShortcutPad { stride: usize },
    ChannelAffine { mean: Rc<Vec<f64>>, inv_std: Rc<Vec<f64>> },
    SoftmaxCrossEntropy { labels: Rc<Vec<usize>>, probs: Rc<Tensor> },
    Sum,
    Mean,
    StraightThrough { mask: Option<Rc<Vec<bool>>> },
    MapGrad(GradFn),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddRow => "add_row",
            Op::AddChannel => "add_channel",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::ConcatCols => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Conv2d { .. } => "conv2d",
            Op::MeanSpatial => "mean_spatial",
            Op::ShortcutPad { .. } => "shortcut_pad",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::StraightThrough { .. } => "straight_through",
            Op::MapGrad(_) => "map_grad",
        }
    }
}

struct Node {
    id: u64,
    value: Tensor,
    op: Op,
    parents: RefCell<Vec<Var>>,
    kind: NodeKind,
    freed: Cell<bool>,
    tape: Rc<TapeInner>,
}

impl Drop for Node {
    fn drop(&mut self) {
        self.tape.live.set(self.tape.live.get() - 1);
        // Unlink long parent chains iteratively so dropping a deep graph
        // cannot overflow the stack.
        let mut stack: Vec<Var> = std::mem::take(self.parents.get_mut());
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(node.parents.get_mut());
            }
        }
    }
}

/// Handle to a recorded node.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}<{}>{:?}", self.0.id, self.0.op.name(), self.0.value)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Var {
    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.kind != NodeKind::Interior
    }

    pub fn is_detached(&self) -> bool {
        self.0.kind == NodeKind::Detached
    }

    pub fn is_freed(&self) -> bool {
        self.0.freed.get()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op.name()
    }

    pub fn parent_ids(&self) -> Vec<u64> {
        self.0.parents.borrow().iter().map(Var::id).collect()
    }

    pub fn ptr_eq(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn tape(&self) -> Tape {
        Tape {
            inner: Rc::clone(&self.0.tape),
        }
    }

    /// Ids of every trainable leaf reachable from this node.
    pub fn reachable_leaf_ids(&self) -> HashSet<u64> {
        let mut out = HashSet::new();
        for v in collect_reachable(self) {
            if v.0.kind == NodeKind::Leaf {
                out.insert(v.id());
            }
        }
        out
    }

    fn record(&self, op: Op, parents: Vec<Var>, value: Tensor) -> Result<Var> {
        self.tape().record(op, parents, value)
    }

    fn check_tape(&self, other: &Var, op: &'static str) -> Result<()> {
        if !Rc::ptr_eq(&self.0.tape, &other.0.tape) {
            return Err(Error::invalid(op, "operands were recorded on different tapes"));
        }
        Ok(())
    }

    fn binary(&self, other: &Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        self.check_tape(other, name)?;
        same_shape(name, self.value(), other.value())?;
        let value = self.value().zip_map(other.value(), f);
        self.record(op, vec![self.clone(), other.clone()], value)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        self.check_tape(row, "add_row")?;
        let (m, n) = dims2("add_row", self.value())?;
        if row.value().len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let mut out = self.value().data().to_vec();
        let b = row.value().data();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.record(
            Op::AddRow,
            vec![self.clone(), row.clone()],
            Tensor::from_parts(self.shape().to_vec(), out),
        )
    }

    /// Adds a per-channel bias to an `N × C × H × W` tensor.
    pub fn add_channel(&self, bias: &Var) -> Result<Var> {
        self.check_tape(bias, "add_channel")?;
        let (n, c, h, w) = dims4("add_channel", self.value())?;
        if bias.value().len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_channel",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut out = self.value().data().to_vec();
        let b = bias.value().data();
        let hw = h * w;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                out[base..base + hw].iter_mut().for_each(|v| *v += b[ch]);
            }
        }
        self.record(
            Op::AddChannel,
            vec![self.clone(), bias.clone()],
            Tensor::from_parts(self.shape().to_vec(), out),
        )
    }

    pub fn scale(&self, s: f64) -> Result<Var> {
        self.record(Op::Scale(s), vec![self.clone()], self.value().map(|v| v * s))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var> {
        self.record(Op::AddScalar, vec![self.clone()], self.value().map(|v| v + s))
    }

    pub fn relu(&self) -> Result<Var> {
        self.record(Op::Relu, vec![self.clone()], self.value().map(|v| v.max(0.0)))
    }

    pub fn tanh(&self) -> Result<Var> {
        self.record(Op::Tanh, vec![self.clone()], self.value().map(f64::tanh))
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.record(Op::Sigmoid, vec![self.clone()], self.value().map(sigmoid))
    }

    pub fn sqrt(&self) -> Result<Var> {
        self.record(Op::Sqrt, vec![self.clone()], self.value().map(f64::sqrt))
    }

    pub fn square(&self) -> Result<Var> {
        self.record(Op::Square, vec![self.clone()], self.value().map(|v| v * v))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_tape(other, "matmul")?;
        let (m, k) = dims2("matmul", self.value())?;
        let (k2, n) = dims2("matmul", other.value())?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_into(self.value().data(), other.value().data(), &mut out, m, k, n);
        self.record(
            Op::MatMul,
            vec![self.clone(), other.clone()],
            Tensor::from_parts(vec![m, n], out),
        )
    }

    pub fn transpose(&self) -> Result<Var> {
        dims2("transpose", self.value())?;
        self.record(Op::Transpose, vec![self.clone()], self.value().transpose())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value().len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::from_parts(shape, self.value().data().to_vec());
        self.record(Op::Reshape, vec![self.clone()], value)
    }

    /// Flattens all trailing dimensions: `N × ...` becomes `N × rest`.
    pub fn flatten(&self) -> Result<Var> {
        let n = self.shape()[0];
        let rest = self.value().len() / n;
        self.reshape(vec![n, rest])
    }

    /// Concatenates two `N × a` and `N × b` matrices along the last axis.
    pub fn concat_cols(&self, other: &Var) -> Result<Var> {
        self.check_tape(other, "concat")?;
        let (m, a) = dims2("concat", self.value())?;
        let (m2, b) = dims2("concat", other.value())?;
        if m != m2 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (x, y) = (self.value().data(), other.value().data());
        let mut out = Vec::with_capacity(m * (a + b));
        for i in 0..m {
            out.extend_from_slice(&x[i * a..(i + 1) * a]);
            out.extend_from_slice(&y[i * b..(i + 1) * b]);
        }
        self.record(
            Op::ConcatCols,
            vec![self.clone(), other.clone()],
            Tensor::from_parts(vec![m, a + b], out),
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.value())?;
        if start >= end || end > n {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {start}..{end} out of bounds for {n} columns"),
            ));
        }
        let x = self.value().data();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + end]);
        }
        self.record(
            Op::SliceCols { start, end },
            vec![self.clone()],
            Tensor::from_parts(vec![m, w], out),
        )
    }

    /// 2-D convolution: input `N × C × H × W`, kernel `O × C × k × k`.
    pub fn conv2d(&self, kernel: &Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_tape(kernel, "conv2d")?;
        let (n, c, h, w) = dims4("conv2d", self.value())?;
        let (o, kc, kh, kw) = dims4("conv2d", kernel.value())?;
        if kc != c || kh != kw || kh > h + 2 * pad || kw > w + 2 * pad || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let g = ConvGeom { channels: c, height: h, width: w, kernel: kh, stride, pad };
        let (oh, ow) = g.out_hw();
        let p = oh * ow;
        let patch = g.patch();
        let mut cols = vec![0.0; p * patch];
        let mut out = vec![0.0; n * o * p];
        let x = self.value().data();
        for i in 0..n {
            im2col(&x[i * c * h * w..(i + 1) * c * h * w], &g, &mut cols);
            tensor::matmul_nt_into(kernel.value().data(), &cols, &mut out[i * o * p..(i + 1) * o * p], o, patch, p);
        }
        self.record(
            Op::Conv2d { stride, pad },
            vec![self.clone(), kernel.clone()],
            Tensor::from_parts(vec![n, o, oh, ow], out),
        )
    }

    /// Global average pool: `N × C × H × W` to `N × C`.
    pub fn mean_spatial(&self) -> Result<Var> {
        let (n, c, h, w) = dims4("mean_spatial", self.value())?;
        let hw = h * w;
        let x = self.value().data();
        let out = (0..n * c)
            .map(|i| x[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.record(Op::MeanSpatial, vec![self.clone()], Tensor::from_parts(vec![n, c], out))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride`
    /// and zero padding up to `out_channels`.
    pub fn shortcut_pad(&self, stride: usize, out_channels: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("shortcut_pad", self.value())?;
        if out_channels < c || stride == 0 {
            return Err(Error::invalid(
                "shortcut_pad",
                format!("cannot map {c} channels to {out_channels} with stride {stride}"),
            ));
        }
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let x = self.value().data();
        let mut out = vec![0.0; n * out_channels * oh * ow];
        for i in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[((i * out_channels + ch) * oh + y) * ow + xx] =
                            x[((i * c + ch) * h + y * stride) * w + xx * stride];
                    }
                }
            }
        }
        self.record(
            Op::ShortcutPad { stride },
            vec![self.clone()],
            Tensor::from_parts(vec![n, out_channels, oh, ow], out),
        )
    }

    /// `gamma[c] * (x - mean[c]) * inv_std[c] + beta[c]` with constant
    /// statistics.
    pub fn channel_affine(&self, gamma: &Var, beta: &Var, mean: Vec<f64>, inv_std: Vec<f64>) -> Result<Var> {
        self.check_tape(gamma, "channel_affine")?;
        self.check_tape(beta, "channel_affine")?;
        let (n, c, h, w) = dims4("channel_affine", self.value())?;
        if gamma.value().len() != c || beta.value().len() != c || mean.len() != c || inv_std.len() != c {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let hw = h * w;
        let (g, b) = (gamma.value().data(), beta.value().data());
        let x = self.value().data();
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    out[k] = g[ch] * ((x[k] - mean[ch]) * inv_std[ch]) + b[ch];
                }
            }
        }
        self.record(
            Op::ChannelAffine { mean: Rc::new(mean), inv_std: Rc::new(inv_std) },
            vec![self.clone(), gamma.clone(), beta.clone()],
            Tensor::from_parts(self.shape().to_vec(), out),
        )
    }

    /// Mean softmax cross-entropy of `B × K` logits against class labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var> {
        let (b, k) = dims2("softmax_cross_entropy", self.value())?;
        if labels.len() != b {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value().data();
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for i in 0..b {
            let (lse, row) = log_softmax_row(&z[i * k..(i + 1) * k]);
            total += lse - z[i * k + labels[i]];
            probs[i * k..(i + 1) * k].copy_from_slice(&row);
        }
        self.record(
            Op::SoftmaxCrossEntropy {
                labels: Rc::new(labels.to_vec()),
                probs: Rc::new(Tensor::from_parts(vec![b, k], probs)),
            },
            vec![self.clone()],
            Tensor::scalar(total / b as f64),
        )
    }

    pub fn sum(&self) -> Result<Var> {
        self.record(Op::Sum, vec![self.clone()], Tensor::scalar(self.value().sum()))
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().len() as f64;
        self.record(Op::Mean, vec![self.clone()], Tensor::scalar(self.value().sum() / n))
    }

    /// Records `value` as the forward result while the backward pass uses
    /// the straight-through estimator: the upstream gradient is passed
    /// unchanged where `mask` is true (everywhere when `mask` is `None`) and
    /// zeroed elsewhere.
    pub fn straight_through(&self, value: Tensor, mask: Option<Vec<bool>>) -> Result<Var> {
        same_shape("straight_through", self.value(), &value)?;
        if let Some(m) = &mask {
            if m.len() != value.len() {
                return Err(Error::invalid("straight_through", "mask length differs from value"));
            }
        }
        self.record(
            Op::StraightThrough { mask: mask.map(Rc::new) },
            vec![self.clone()],
            value,
        )
    }

    /// Identity in the forward pass; `f` transforms the upstream gradient.
    pub fn map_grad(&self, f: impl Fn(&Tensor) -> Tensor + 'static) -> Result<Var> {
        self.record(Op::MapGrad(Rc::new(f)), vec![self.clone()], self.value().clone())
    }

    /// Backpropagates from this scalar node without retaining anything.
    pub fn backward(&self) -> Result<Gradients> {
        self.backward_retaining(&[])
    }

    /// Backpropagates from this scalar node. Sub-graphs reachable from any
    /// node in `retain` stay intact; every other interior node visited is
    /// released.
    pub fn backward_retaining(&self, retain: &[Var]) -> Result<Gradients> {
        if self.value().len() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let order = collect_reachable(self);
        if let Some(bad) = order.iter().find(|v| v.is_freed()) {
            return Err(Error::FreedGraph(bad.id()));
        }
        let precision = self.0.tape.precision;
        let mut grads: HashMap<u64, Tensor> = HashMap::with_capacity(order.len());
        grads.insert(self.id(), Tensor::ones(self.shape().to_vec()));
        for node in &order {
            let Some(g) = grads.get(&node.id()) else { continue };
            let parents = node.0.parents.borrow();
            if parents.is_empty() {
                continue;
            }
            let pgrads = node_backward(node, &parents, g);
            for (p, mut pg) in parents.iter().zip(pgrads) {
                if precision == Precision::F32 {
                    pg.round_f32();
                }
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }

        let mut protected = HashSet::new();
        for r in retain {
            for v in collect_reachable(r) {
                protected.insert(v.id());
            }
        }
        for node in &order {
            if node.0.kind == NodeKind::Interior && !protected.contains(&node.id()) {
                node.0.freed.set(true);
                node.0.parents.borrow_mut().clear();
            }
        }
        Ok(Gradients { grads })
    }
}

/// Nodes reachable from `root` (including it), sorted by decreasing id.
fn collect_reachable(root: &Var) -> Vec<Var> {
    let mut seen = HashSet::new();
    let mut stack = vec![root.clone()];
    let mut out = Vec::new();
    while let Some(v) = stack.pop() {
        if !seen.insert(v.id()) {
            continue;
        }
        for p in v.0.parents.borrow().iter() {
            if !seen.contains(&p.id()) {
                stack.push(p.clone());
            }
        }
        out.push(v);
    }
    out.sort_unstable_by(|a, b| b.id().cmp(&a.id()));
    out
}

/// Gradients of one backward pass, keyed by node.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(&v.id())
    }

    /// Gradient of `v`, or zeros when no path from the loss reached it.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Returns `(logsumexp, softmax)` of one row.
pub(crate) fn log_softmax_row(z: &[f64]) -> (f64, Vec<f64>) {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln(), e.into_iter().map(|v| v / s).collect())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::invalid(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok(t.dims2())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::invalid(op, format!("expected an NCHW tensor, got shape {:?}", t.shape())));
    }
    Ok(t.dims4())
}

/// Vector-Jacobian products of one node, one tensor per parent.
fn node_backward(node: &Var, parents: &[Var], g: &Tensor) -> Vec<Tensor> {
    let y = node.value();
    let pv = |i: usize| parents[i].value();
    match &node.0.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), g.map(|v| -v)],
        Op::Mul => vec![g.zip_map(pv(1), |a, b| a * b), g.zip_map(pv(0), |a, b| a * b)],
        Op::Div => {
            let b = pv(1);
            let da = g.zip_map(b, |gv, bv| gv / bv);
            let mut db = g.zip_map(y, |gv, yv| gv * yv);
            for (d, bv) in db.data_mut().iter_mut().zip(b.data()) {
                *d = -*d / bv;
            }
            vec![da, db]
        }
        Op::AddRow => {
            let (m, n) = g.dims2();
            let mut db = vec![0.0; n];
            for i in 0..m {
                for (d, gv) in db.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                    *d += gv;
                }
            }
            vec![g.clone(), Tensor::from_parts(pv(1).shape().to_vec(), db)]
        }
        Op::AddChannel => {
            let (n, c, h, w) = g.dims4();
            let hw = h * w;
            let mut db = vec![0.0; c];
            for i in 0..n {
                for (ch, d) in db.iter_mut().enumerate() {
                    let base = (i * c + ch) * hw;
                    *d += g.data()[base..base + hw].iter().sum::<f64>();
                }
            }
            vec![g.clone(), Tensor::from_parts(pv(1).shape().to_vec(), db)]
        }
        Op::Scale(s) => vec![g.map(|v| v * s)],
        Op::AddScalar => vec![g.clone()],
        Op::Relu => vec![g.zip_map(pv(0), |gv, x| if x > 0.0 { gv } else { 0.0 })],
        Op::Tanh => vec![g.zip_map(y, |gv, t| gv * (1.0 - t * t))],
        Op::Sigmoid => vec![g.zip_map(y, |gv, s| gv * s * (1.0 - s))],
        // zero gradient at sqrt(0) instead of an infinite one
        Op::Sqrt => vec![g.zip_map(y, |gv, r| if r > 0.0 { gv * 0.5 / r } else { 0.0 })],
        Op::Square => vec![g.zip_map(pv(0), |gv, x| gv * 2.0 * x)],
        Op::MatMul => {
            let (a, b) = (pv(0), pv(1));
            let (m, k) = a.dims2();
            let n = b.dims2().1;
            let mut da = vec![0.0; m * k];
            tensor::matmul_nt_into(g.data(), b.data(), &mut da, m, n, k);
            let mut db = vec![0.0; k * n];
            tensor::matmul_tn_into(a.data(), g.data(), &mut db, m, k, n);
            vec![Tensor::from_parts(vec![m, k], da), Tensor::from_parts(vec![k, n], db)]
        }
        Op::Transpose => vec![g.transpose()],
        Op::Reshape => vec![Tensor::from_parts(pv(0).shape().to_vec(), g.data().to_vec())],
        Op::ConcatCols => {
            let (m, a) = pv(0).dims2();
            let b = pv(1).dims2().1;
            let mut ga = Vec::with_capacity(m * a);
            let mut gb = Vec::with_capacity(m * b);
            for i in 0..m {
                let row = &g.data()[i * (a + b)..(i + 1) * (a + b)];
                ga.extend_from_slice(&row[..a]);
                gb.extend_from_slice(&row[a..]);
            }
            vec![Tensor::from_parts(vec![m, a], ga), Tensor::from_parts(vec![m, b], gb)]
        }
        Op::SliceCols { start, end } => {
            let (m, n) = pv(0).dims2();
            let w = end - start;
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                gx[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            vec![Tensor::from_parts(vec![m, n], gx)]
        }
        Op::Conv2d { stride, pad } => {
            let (x, k) = (pv(0), pv(1));
            let (n, c, h, w) = x.dims4();
            let (o, _, kk, _) = k.dims4();
            let geom = ConvGeom { channels: c, height: h, width: w, kernel: kk, stride: *stride, pad: *pad };
            let (oh, ow) = geom.out_hw();
            let p = oh * ow;
            let patch = geom.patch();
            let img = c * h * w;
            let mut cols = vec![0.0; p * patch];
            let mut dcols = vec![0.0; p * patch];
            let mut dk_i = vec![0.0; o * patch];
            let mut dk = vec![0.0; o * patch];
            let mut dx = vec![0.0; n * img];
            for i in 0..n {
                let gi = &g.data()[i * o * p..(i + 1) * o * p];
                im2col(&x.data()[i * img..(i + 1) * img], &geom, &mut cols);
                tensor::matmul_into(gi, &cols, &mut dk_i, o, p, patch);
                for (d, v) in dk.iter_mut().zip(&dk_i) {
                    *d += v;
                }
                tensor::matmul_tn_into(gi, k.data(), &mut dcols, o, p, patch);
                col2im(&dcols, &geom, &mut dx[i * img..(i + 1) * img]);
            }
            vec![
                Tensor::from_parts(x.shape().to_vec(), dx),
                Tensor::from_parts(k.shape().to_vec(), dk),
            ]
        }
        Op::MeanSpatial => {
            let (n, c, h, w) = pv(0).dims4();
            let hw = h * w;
            let mut dx = vec![0.0; n * c * hw];
            for i in 0..n * c {
                let v = g.data()[i] / hw as f64;
                dx[i * hw..(i + 1) * hw].iter_mut().for_each(|d| *d = v);
            }
            vec![Tensor::from_parts(pv(0).shape().to_vec(), dx)]
        }
        Op::ShortcutPad { stride } => {
            let (n, c, h, w) = pv(0).dims4();
            let (_, oc, oh, ow) = g.dims4();
            let mut dx = vec![0.0; n * c * h * w];
            for i in 0..n {
                for ch in 0..c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            dx[((i * c + ch) * h + yy * stride) * w + xx * stride] =
                                g.data()[((i * oc + ch) * oh + yy) * ow + xx];
                        }
                    }
                }
            }
            vec![Tensor::from_parts(pv(0).shape().to_vec(), dx)]
        }
        Op::ChannelAffine { mean, inv_std } => {
            let x = pv(0);
            let gamma = pv(1).data();
            let (n, c, h, w) = x.dims4();
            let hw = h * w;
            let mut dx = vec![0.0; x.len()];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for k in base..base + hw {
                        let gv = g.data()[k];
                        dx[k] = gv * gamma[ch] * inv_std[ch];
                        dg[ch] += gv * ((x.data()[k] - mean[ch]) * inv_std[ch]);
                        db[ch] += gv;
                    }
                }
            }
            vec![
                Tensor::from_parts(x.shape().to_vec(), dx),
                Tensor::from_parts(pv(1).shape().to_vec(), dg),
                Tensor::from_parts(pv(2).shape().to_vec(), db),
            ]
        }
        Op::SoftmaxCrossEntropy { labels, probs } => {
            let (b, k) = probs.dims2();
            let scale = g.item() / b as f64;
            let mut dz = probs.data().to_vec();
            for (i, &l) in labels.iter().enumerate() {
                dz[i * k + l] -= 1.0;
            }
            dz.iter_mut().for_each(|v| *v *= scale);
            vec![Tensor::from_parts(vec![b, k], dz)]
        }
        Op::Sum => vec![Tensor::full(pv(0).shape().to_vec(), g.item())],
        Op::Mean => {
            let n = pv(0).len() as f64;
            vec![Tensor::full(pv(0).shape().to_vec(), g.item() / n)]
        }
        Op::StraightThrough { mask } => match mask {
            None => vec![g.clone()],
            Some(m) => {
                let mut d = g.clone();
                for (v, &keep) in d.data_mut().iter_mut().zip(m.iter()) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                vec![d]
            }
        },
        Op::MapGrad(f) => vec![f(g)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape {
        Tape::new(Precision::F64)
    }

    #[test]
    fn product_rule() {
        let t = tape();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.leaf(Tensor::scalar(3.0));
        let z = x.mul(&y).unwrap();
        assert_eq!(z.value().item(), 6.0);
        let g = z.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 3.0);
        assert_eq!(g.get(&y).unwrap().item(), 2.0);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let t = tape();
        let x = t.leaf(Tensor::scalar(1.0));
        let loss = x.scale(-1.5).unwrap().relu().unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 0.0);
    }

    #[test]
    fn relu_kink_subgradient_is_zero() {
        let t = tape();
        let x = t.leaf(Tensor::scalar(0.0));
        let g = x.relu().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 0.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let t = tape();
        let x = t.leaf(Tensor::scalar(2.0));
        let d = t.detach(&x);
        assert!(d.is_detached() && d.parent_ids().is_empty());
        let loss = d.mul(&x).unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 2.0);

        let t2 = tape();
        let a = t2.leaf(Tensor::scalar(1.5));
        let b = a.tanh().unwrap().scale(4.0).unwrap();
        let loss = t2.detach(&b).mul(&t2.constant(Tensor::scalar(3.0))).unwrap();
        let g = loss.backward().unwrap();
        assert!(g.get(&a).is_none());
    }

    #[test]
    fn shapes_of_matmul_and_concat() {
        let t = tape();
        let a = t.leaf(Tensor::zeros(vec![2, 3]));
        let b = t.leaf(Tensor::zeros(vec![3, 1]));
        assert_eq!(a.matmul(&b).unwrap().shape(), &[2, 1]);
        let p = t.leaf(Tensor::zeros(vec![5, 1]));
        let q = t.leaf(Tensor::zeros(vec![5, 1]));
        assert_eq!(p.concat_cols(&q).unwrap().shape(), &[5, 2]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let t = tape();
        let a = t.leaf(Tensor::zeros(vec![2, 3]));
        let b = t.leaf(Tensor::zeros(vec![2, 3]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = t.leaf(Tensor::zeros(vec![3, 2]));
        let err = a.add(&c).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn topological_ids() {
        let t = tape();
        let x = t.leaf(Tensor::scalar(1.0));
        let y = x.tanh().unwrap().add(&x).unwrap();
        for p in y.parent_ids() {
            assert!(p < y.id());
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let t = tape();
        let x = t.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(x.relu().unwrap().backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn freed_graph_errors_and_retained_survives() {
        let t = tape();
        let x = t.leaf(Tensor::scalar(0.3));
        let h = x.tanh().unwrap();
        let l1 = h.scale(2.0).unwrap();
        l1.backward().unwrap();
        assert!(h.is_freed());
        let l2 = h.scale(3.0).unwrap();
        assert!(matches!(l2.backward(), Err(Error::FreedGraph(_))));

        let h = x.tanh().unwrap();
        let l1 = h.scale(2.0).unwrap();
        l1.backward_retaining(&[h.clone()]).unwrap();
        assert!(!h.is_freed());
        let g = h.scale(3.0).unwrap().backward().unwrap();
        let expect = 3.0 * (1.0 - 0.3f64.tanh().powi(2));
        assert!((g.get(&x).unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn rebase_copies_value_and_cuts_history() {
        let t = tape();
        let x = t.leaf(Tensor::vector(vec![0.1, -0.7]));
        let w = x.tanh().unwrap().scale(1.7).unwrap();
        let r = t.rebase_leaf(&w);
        assert_eq!(r.value().data(), w.value().data());
        assert!(r.is_leaf() && !r.is_detached());
        let g = r.sum().unwrap().backward().unwrap();
        assert!(g.get(&x).is_none());
        assert_eq!(g.get(&r).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn live_count_returns_after_drop() {
        let t = tape();
        let before = t.live_nodes();
        {
            let x = t.leaf(Tensor::scalar(1.0));
            let mut y = x.clone();
            for _ in 0..100_000 {
                y = y.add_scalar(1e-3).unwrap();
            }
            assert!(t.live_nodes() > 100_000);
        }
        assert_eq!(t.live_nodes(), before);
    }

    #[test]
    fn f32_mode_rounds_values() {
        let t = Tape::new(Precision::F32);
        let x = t.leaf(Tensor::scalar(0.1));
        assert_eq!(x.value().item(), 0.1f32 as f64);
        let y = x.scale(3.0).unwrap();
        assert_eq!(y.value().item(), (0.1f32 as f64 * 3.0) as f32 as f64);
    }

    #[test]
    fn non_finite_detected_when_checking() {
        let t = Tape::with_finite_check(Precision::F64, true);
        let x = t.leaf(Tensor::scalar(-1.0));
        assert!(matches!(x.sqrt(), Err(Error::NonFinite { op: "sqrt" })));
        let t = Tape::with_finite_check(Precision::F64, false);
        let x = t.leaf(Tensor::scalar(-1.0));
        assert!(x.sqrt().unwrap().value().item().is_nan());
    }

    #[test]
    fn straight_through_mask() {
        let t = tape();
        let x = t.leaf(Tensor::vector(vec![0.5, 3.0]));
        let q = x
            .straight_through(Tensor::vector(vec![0.4, 2.0]), Some(vec![true, false]))
            .unwrap();
        let g = q.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 0.0]);
    }
}
