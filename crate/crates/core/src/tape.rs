//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward ops append nodes in topological order; `backward` sweeps the tape
//! in reverse exactly once, accumulating gradients into per-node buffers.
//! Node values are immutable once pushed. Shape violations and non-finite
//! outputs panic with the offending op named; `forward_op` offers a
//! `Result`-returning dispatch over the public op set.

use crate::math;
use crate::tensor::Tensor;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    Transpose(NodeId),
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    DepthwiseConv1d { x: NodeId, w: NodeId, b: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    RepeatRows { x: NodeId, counts: Vec<usize> },
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    L1Loss(NodeId, NodeId),
    MseLoss(NodeId, NodeId),
    StraightThrough(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Epsilon added to the variance in layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Additive pre-softmax logit for masked attention positions. Large enough
/// that `exp(x - max)` underflows to exactly zero whenever any position is
/// unmasked, while keeping all stored values finite.
pub const MASK_NEG: f64 = -1.0e30;

/// Dispatchable op kinds for [`Graph::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale(f64),
    Concat,
    Split { start: usize, len: usize },
    Transpose,
    Softmax,
    LayerNorm,
    Gelu,
    Sigmoid,
    DepthwiseConv1d,
    EmbeddingLookup(Vec<usize>),
    MeanPoolAxis,
    L1Loss,
    MseLoss,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpError {
    ShapeMismatch { op: &'static str, detail: alloc::string::String },
    WrongArity { op: &'static str, expected: usize, got: usize },
}

impl core::fmt::Display for OpError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            OpError::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            OpError::WrongArity { op, expected, got } => {
                write!(f, "{op}: expected {expected} inputs, got {got}")
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        assert!(value.all_finite(), "non-finite output from {:?}", op_name(&op));
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.rg(a) || self.rg(b)
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 2, "matmul lhs must be 2-d");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-d");
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.rg2(a, b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.value(a).add(self.value(b));
        let rg = self.rg2(a, b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.value(a).sub(self.value(b));
        let rg = self.rg2(a, b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data().iter()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        let rg = self.rg2(a, b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Broadcast-add a vector `[d]` to every row of `[L, d]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape().len(), 1, "add_row bias must be rank 1");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let d = av.cols();
        let mut data = av.data().to_vec();
        for r in data.chunks_mut(d) {
            for (x, b) in r.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data);
        let rg = self.rg2(a, row);
        self.push(t, Op::AddRow(a, row), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let d = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape().len(), 2, "concat_rows parts must be 2-d");
            assert_eq!(v.cols(), d, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(rows, d, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.shape().len(), 2, "concat_cols parts must be 2-d");
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.shape().len(), 2, "slice_rows input must be 2-d");
        assert!(start + len <= v.rows(), "slice_rows out of range");
        let d = v.cols();
        let data = v.data()[start * d..(start + len) * d].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::matrix(len, d, data), Op::SliceRows(a, start, len), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.shape().len(), 2, "slice_cols input must be 2-d");
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(rows, len, data), Op::SliceCols(a, start, len), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.shape().len(), 2, "transpose input must be 2-d");
        let (m, n) = (v.rows(), v.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = v.get(i, j);
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, m, data), Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let t = self.value(a).reshaped(shape);
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = v.row(r);
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &xi) in data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                let e = math::exp(xi - mx);
                *o = e;
                sum += e;
            }
            for o in &mut data[r * cols..(r + 1) * cols] {
                *o /= sum;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        assert_eq!(gv.len(), d, "layernorm gamma width");
        assert_eq!(bv.len(), d, "layernorm beta width");
        let mut data = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = math::mean(row);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(var + LAYERNORM_EPS);
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta }, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x * math::norm_cdf(x));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(math::sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(math::softplus);
        let rg = self.rg(a);
        self.push(t, Op::Softplus(a), rg)
    }

    /// Depthwise 1-d convolution over rows with same zero padding.
    /// `x` is `[L, d]`, `w` is `[k, d]` with odd `k`, `b` is `[d]`.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (l, d) = (xv.rows(), xv.cols());
        let k = wv.rows();
        assert_eq!(wv.cols(), d, "depthwise_conv1d kernel width");
        assert_eq!(bv.len(), d, "depthwise_conv1d bias width");
        assert!(k % 2 == 1, "depthwise_conv1d kernel size must be odd");
        let half = k / 2;
        let mut data = vec![0.0; l * d];
        for t in 0..l {
            let out = &mut data[t * d..(t + 1) * d];
            out.copy_from_slice(bv.data());
            for j in 0..k {
                let s = t as isize + j as isize - half as isize;
                if s < 0 || s >= l as isize {
                    continue;
                }
                let xr = xv.row(s as usize);
                let wr = wv.row(j);
                for c in 0..d {
                    out[c] += wr[c] * xr[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::matrix(l, d, data), Op::DepthwiseConv1d { x, w, b }, rg)
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        assert_eq!(tv.shape().len(), 2, "embedding table must be 2-d");
        let (v, d) = (tv.rows(), tv.cols());
        assert!(!ids.is_empty(), "embedding of empty id list");
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            data.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::matrix(ids.len(), d, data),
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        )
    }

    /// Repeat row `i` of `x` `counts[i]` times, preserving order.
    pub fn repeat_rows(&mut self, x: NodeId, counts: &[usize]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows(), counts.len(), "repeat_rows count mismatch");
        assert!(counts.iter().all(|&c| c >= 1), "repeat_rows counts must be >= 1");
        let d = xv.cols();
        let total: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(total * d);
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                data.extend_from_slice(xv.row(i));
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(total, d, data), Op::RepeatRows { x, counts: counts.to_vec() }, rg)
    }

    /// Mean over rows: `[L, d]` -> `[d]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.shape().len(), 2, "mean_rows input must be 2-d");
        let (l, d) = (v.rows(), v.cols());
        let mut data = vec![0.0; d];
        for r in 0..l {
            for (o, &x) in data.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        for o in &mut data {
            *o /= l as f64;
        }
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Mean absolute error between two same-shape tensors.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "l1_loss shape mismatch");
        let s: f64 =
            av.data().iter().zip(bv.data()).map(|(x, y)| math::abs(x - y)).sum::<f64>() / av.len() as f64;
        let rg = self.rg2(a, b);
        self.push(Tensor::scalar(s), Op::L1Loss(a, b), rg)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse_loss shape mismatch");
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            / av.len() as f64;
        let rg = self.rg2(a, b);
        self.push(Tensor::scalar(s), Op::MseLoss(a, b), rg)
    }

    /// Forward takes `value`; backward passes the output gradient to `src`
    /// unchanged (identity Jacobian). `value` must match the shape of `src`.
    pub fn straight_through(&mut self, src: NodeId, value: Tensor) -> NodeId {
        assert_eq!(self.value(src).shape(), value.shape(), "straight_through shape mismatch");
        let rg = self.rg(src);
        self.push(value, Op::StraightThrough(src), rg)
    }

    // ── Dispatch ────────────────────────────────────────────────────────

    /// Checked dispatch over the public op set. Validates arity and shapes up
    /// front and returns an error instead of panicking on mismatch.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, OpError> {
        fn arity(op: &'static str, inputs: &[NodeId], n: usize) -> Result<(), OpError> {
            if inputs.len() != n {
                return Err(OpError::WrongArity { op, expected: n, got: inputs.len() });
            }
            Ok(())
        }
        let shape_err = |op: &'static str, detail: alloc::string::String| OpError::ShapeMismatch { op, detail };
        match kind {
            OpKind::MatMul => {
                arity("matmul", inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                    return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                Ok(self.matmul(inputs[0], inputs[1]))
            }
            OpKind::Add => {
                arity("add", inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape() != b.shape() {
                    return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                Ok(self.add(inputs[0], inputs[1]))
            }
            OpKind::Mul => {
                arity("mul", inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape() != b.shape() {
                    return Err(shape_err("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                Ok(self.mul(inputs[0], inputs[1]))
            }
            OpKind::Scale(c) => {
                arity("scale", inputs, 1)?;
                Ok(self.scale(inputs[0], c))
            }
            OpKind::Concat => {
                if inputs.is_empty() {
                    return Err(OpError::WrongArity { op: "concat", expected: 1, got: 0 });
                }
                let d = self.value(inputs[0]).cols();
                for &p in inputs {
                    let v = self.value(p);
                    if v.shape().len() != 2 || v.cols() != d {
                        return Err(shape_err("concat", format!("{:?}", v.shape())));
                    }
                }
                Ok(self.concat_rows(inputs))
            }
            OpKind::Split { start, len } => {
                arity("split", inputs, 1)?;
                let v = self.value(inputs[0]);
                if v.shape().len() != 2 || start + len > v.rows() {
                    return Err(shape_err(
                        "split",
                        format!("rows {} start {start} len {len}", v.rows()),
                    ));
                }
                Ok(self.slice_rows(inputs[0], start, len))
            }
            OpKind::Transpose => {
                arity("transpose", inputs, 1)?;
                if self.value(inputs[0]).shape().len() != 2 {
                    return Err(shape_err("transpose", format!("{:?}", self.value(inputs[0]).shape())));
                }
                Ok(self.transpose(inputs[0]))
            }
            OpKind::Softmax => {
                arity("softmax", inputs, 1)?;
                Ok(self.softmax_rows(inputs[0]))
            }
            OpKind::LayerNorm => {
                arity("layernorm", inputs, 3)?;
                let d = self.value(inputs[0]).cols();
                if self.value(inputs[1]).len() != d || self.value(inputs[2]).len() != d {
                    return Err(shape_err("layernorm", format!("width {d}")));
                }
                Ok(self.layernorm(inputs[0], inputs[1], inputs[2]))
            }
            OpKind::Gelu => {
                arity("gelu", inputs, 1)?;
                Ok(self.gelu(inputs[0]))
            }
            OpKind::Sigmoid => {
                arity("sigmoid", inputs, 1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::DepthwiseConv1d => {
                arity("depthwise_conv1d", inputs, 3)?;
                let (x, w, b) = (self.value(inputs[0]), self.value(inputs[1]), self.value(inputs[2]));
                if w.cols() != x.cols() || b.len() != x.cols() || w.rows() % 2 == 0 {
                    return Err(shape_err(
                        "depthwise_conv1d",
                        format!("x {:?} w {:?} b {:?}", x.shape(), w.shape(), b.shape()),
                    ));
                }
                Ok(self.depthwise_conv1d(inputs[0], inputs[1], inputs[2]))
            }
            OpKind::EmbeddingLookup(ids) => {
                arity("embedding_lookup", inputs, 1)?;
                let t = self.value(inputs[0]);
                if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
                    return Err(shape_err("embedding_lookup", format!("id {bad} >= {}", t.rows())));
                }
                Ok(self.embedding(inputs[0], &ids))
            }
            OpKind::MeanPoolAxis => {
                arity("mean_pool_axis", inputs, 1)?;
                Ok(self.mean_rows(inputs[0]))
            }
            OpKind::L1Loss => {
                arity("l1_loss", inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape() != b.shape() {
                    return Err(shape_err("l1_loss", format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                Ok(self.l1_loss(inputs[0], inputs[1]))
            }
            OpKind::MseLoss => {
                arity("mse_loss", inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape() != b.shape() {
                    return Err(shape_err("mse_loss", format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                Ok(self.mse_loss(inputs[0], inputs[1]))
            }
        }
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate only into nodes
    /// reachable from parameters (`requires_grad`); panics if `loss` is not a
    /// scalar.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accumulate(&mut self, target: NodeId, delta: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[target.0];
        match slot {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(a).clone();
                let bv = self.value(b).clone();
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.rg(a) {
                    // dA = G @ B^T
                    let bt = transpose_raw(bv.data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    // dB = A^T @ G
                    let at = transpose_raw(av.data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let da: Vec<f64> =
                        g.iter().zip(self.value(b).data()).map(|(gi, bi)| gi * bi).collect();
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    let db: Vec<f64> =
                        g.iter().zip(self.value(a).data()).map(|(gi, ai)| gi * ai).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accumulate(a, &da);
            }
            Op::AddRow(a, row) => {
                self.accumulate(a, g);
                if self.rg(row) {
                    let d = self.value(row).len();
                    let mut dr = vec![0.0; d];
                    for chunk in g.chunks(d) {
                        for (o, &x) in dr.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    self.accumulate(row, &dr);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        let dp = g[off..off + n].to_vec();
                        self.accumulate(p, &dp);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).rows();
                let total = self.value(NodeId(i)).cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(p, &dp);
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start, _len) => {
                let v = self.value(a);
                let d = v.cols();
                let mut da = vec![0.0; v.len()];
                da[start * d..start * d + g.len()].copy_from_slice(g);
                self.accumulate(a, &da);
            }
            Op::SliceCols(a, start, len) => {
                let v = self.value(a);
                let (rows, cols) = (v.rows(), v.cols());
                let mut da = vec![0.0; v.len()];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(a, &da);
            }
            Op::Transpose(a) => {
                let out = self.value(NodeId(i));
                let (m, n) = (out.rows(), out.cols());
                let da = transpose_raw(g, m, n);
                self.accumulate(a, &da);
            }
            Op::Reshape(a) => {
                self.accumulate(a, g);
            }
            Op::SoftmaxRows(a) => {
                let s = self.value(NodeId(i)).clone();
                let (rows, cols) = (s.rows(), s.cols());
                let mut da = vec![0.0; s.len()];
                for r in 0..rows {
                    let srow = s.row(r);
                    let grow = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                    for j in 0..cols {
                        da[r * cols + j] = srow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.value(x).clone();
                let gv = self.value(gamma).clone();
                let d = xv.cols();
                let rows = xv.rows();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = xv.row(r);
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = math::mean(row);
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / math::sqrt(var + LAYERNORM_EPS);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gv.data()[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Gelu(a) => {
                let xv = self.value(a);
                let da: Vec<f64> = g
                    .iter()
                    .zip(xv.data())
                    .map(|(gi, &x)| gi * (math::norm_cdf(x) + x * math::norm_pdf(x)))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid(a) => {
                let s = self.value(NodeId(i)).clone();
                let da: Vec<f64> = g.iter().zip(s.data()).map(|(gi, &si)| gi * si * (1.0 - si)).collect();
                self.accumulate(a, &da);
            }
            Op::Softplus(a) => {
                let xv = self.value(a);
                let da: Vec<f64> =
                    g.iter().zip(xv.data()).map(|(gi, &x)| gi * math::sigmoid(x)).collect();
                self.accumulate(a, &da);
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let xv = self.value(x).clone();
                let wv = self.value(w).clone();
                let (l, d) = (xv.rows(), xv.cols());
                let k = wv.rows();
                let half = k / 2;
                if self.rg(x) {
                    let mut dx = vec![0.0; l * d];
                    for t in 0..l {
                        let grow = &g[t * d..(t + 1) * d];
                        for j in 0..k {
                            let s = t as isize + j as isize - half as isize;
                            if s < 0 || s >= l as isize {
                                continue;
                            }
                            let wr = wv.row(j);
                            let dxr = &mut dx[s as usize * d..(s as usize + 1) * d];
                            for c in 0..d {
                                dxr[c] += wr[c] * grow[c];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.rg(w) {
                    let mut dw = vec![0.0; k * d];
                    for t in 0..l {
                        let grow = &g[t * d..(t + 1) * d];
                        for j in 0..k {
                            let s = t as isize + j as isize - half as isize;
                            if s < 0 || s >= l as isize {
                                continue;
                            }
                            let xr = xv.row(s as usize);
                            let dwr = &mut dw[j * d..(j + 1) * d];
                            for c in 0..d {
                                dwr[c] += xr[c] * grow[c];
                            }
                        }
                    }
                    self.accumulate(w, &dw);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; d];
                    for t in 0..l {
                        for (o, &x) in db.iter_mut().zip(&g[t * d..(t + 1) * d]) {
                            *o += x;
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(table) {
                    let tv = self.value(table);
                    let d = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c];
                        }
                    }
                    self.accumulate(table, &dt);
                }
            }
            Op::RepeatRows { x, counts } => {
                let xv = self.value(x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                let mut off = 0;
                for (i_row, &c) in counts.iter().enumerate() {
                    for _ in 0..c {
                        for j in 0..d {
                            dx[i_row * d + j] += g[off * d + j];
                        }
                        off += 1;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::MeanRows(a) => {
                let v = self.value(a);
                let (l, d) = (v.rows(), v.cols());
                let mut da = vec![0.0; l * d];
                for r in 0..l {
                    for j in 0..d {
                        da[r * d + j] = g[j] / l as f64;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::SumAll(a) => {
                let n = self.value(a).len();
                let da = vec![g[0]; n];
                self.accumulate(a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.value(a).len();
                let da = vec![g[0] / n as f64; n];
                self.accumulate(a, &da);
            }
            Op::L1Loss(a, b) => {
                let (av, bv) = (self.value(a).clone(), self.value(b).clone());
                let n = av.len() as f64;
                let sign = |x: f64, y: f64| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if self.rg(a) {
                    let da: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| g[0] * sign(x, y) / n)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    let db: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| -g[0] * sign(x, y) / n)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::MseLoss(a, b) => {
                let (av, bv) = (self.value(a).clone(), self.value(b).clone());
                let n = av.len() as f64;
                if self.rg(a) {
                    let da: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| g[0] * 2.0 * (x - y) / n)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    let db: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| -g[0] * 2.0 * (x - y) / n)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::StraightThrough(src) => {
                self.accumulate(src, g);
            }
        }
    }

    /// Gradient of the last `backward` with respect to `id`; zeros when the
    /// node is not on any path to the loss.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let shape = self.value(id).shape().to_vec();
        match &self.grads.get(id.0) {
            Some(Some(buf)) => Tensor::new(shape, buf.clone()),
            _ => Tensor::zeros(&shape),
        }
    }

    pub fn has_grad(&self, id: NodeId) -> bool {
        matches!(self.grads.get(id.0), Some(Some(_)))
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::SoftmaxRows(..) => "softmax",
        Op::LayerNorm { .. } => "layernorm",
        Op::Gelu(..) => "gelu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softplus(..) => "softplus",
        Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
        Op::Embedding { .. } => "embedding_lookup",
        Op::RepeatRows { .. } => "repeat_rows",
        Op::MeanRows(..) => "mean_pool_axis",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::L1Loss(..) => "l1_loss",
        Op::MseLoss(..) => "mse_loss",
        Op::StraightThrough(..) => "straight_through",
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn leafy(g: &mut Graph, t: Tensor) -> NodeId {
        g.leaf(t, true)
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let mut g = Graph::new();
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = Tensor::matrix(3, 3, (1..=9).map(|x| x as f64).collect());
        let i = g.constant(eye);
        let m = g.constant(a.clone());
        let out = g.matmul(i, m);
        assert_eq!(g.value(out).data(), a.data());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![0.0; 4]));
        let s = g.softmax_rows(x);
        for &v in g.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Prng::seed(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(5, 7, rng.gaussian_vec(35)));
        let s = g.softmax_rows(x);
        let sv = g.value(s);
        for r in 0..5 {
            let sum: f64 = sv.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(sv.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn l1_loss_of_identical_inputs_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let y = g.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let l = g.l1_loss(x, y);
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = leafy(&mut g, Tensor::vector(vec![3.0]));
        let sq = g.mul(x, x);
        let loss = g.sum_all(sq);
        g.backward(loss);
        assert_eq!(g.grad(x).data(), &[6.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = leafy(&mut g, Tensor::vector(vec![2.0]));
        let p = leafy(&mut g, Tensor::vector(vec![5.0, 5.0]));
        let loss = g.sum_all(x);
        g.backward(loss);
        assert_eq!(g.grad(p).data(), &[0.0, 0.0]);
        assert!(!g.has_grad(p));
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = leafy(&mut g, Tensor::vector(vec![1.0, 2.0]));
        g.backward(x);
    }

    #[test]
    #[should_panic(expected = "inner dims")]
    fn matmul_shape_mismatch_panics() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]));
        g.matmul(a, b);
    }

    #[test]
    fn forward_op_reports_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]));
        let err = g.forward_op(OpKind::MatMul, &[a, b]).unwrap_err();
        assert!(matches!(err, OpError::ShapeMismatch { op: "matmul", .. }));
        let err = g.forward_op(OpKind::Add, &[a, b]).unwrap_err();
        assert!(matches!(err, OpError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn forward_op_dispatch_matches_methods() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(Tensor::matrix(2, 2, vec![0.5, 0.5, 0.5, 0.5]));
        let via_dispatch = g.forward_op(OpKind::MatMul, &[a, b]).unwrap();
        let via_method = g.matmul(a, b);
        assert_eq!(g.value(via_dispatch).data(), g.value(via_method).data());
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_output_panics() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0e308]));
        let b = g.constant(Tensor::vector(vec![1.0e308]));
        g.mul(a, b); // overflows to inf
    }

    // ── Finite-difference checks, one per op kind ──────────────────────

    /// Central-difference gradient of `build` with respect to every entry of
    /// every input, compared against the analytic backward pass.
    fn fd_check(build: impl Fn(&mut Graph, &[Tensor]) -> NodeId, inputs: &[Tensor]) {
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let loss = build(&mut g, ins);
            g.value(loss).data()[0]
        };
        let mut g = Graph::new();
        let loss = build(&mut g, inputs);
        g.backward(loss);

        let h = 1e-5;
        for (pi, t) in inputs.iter().enumerate() {
            // Leaves are pushed first, in order, by every `build` invocation.
            let analytic = g.grad(NodeId(pi));
            for e in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[pi].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[pi].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                let rel = (a - fd).abs() / denom;
                assert!(rel < 1e-4, "input {pi} entry {e}: analytic {a} vs fd {fd} (rel {rel})");
            }
        }
    }

    fn rand_mat(rng: &mut Prng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.range_f64(-1.0, 1.0)).collect())
    }

    fn rand_vec(rng: &mut Prng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect())
    }

    #[test]
    fn fd_matmul() {
        let mut rng = Prng::seed(10);
        let ins = [rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2)];
        fd_check(
            |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let m = g.matmul(a, b);
                g.sum_all(m)
            },
            &ins,
        );
    }

    #[test]
    fn fd_elementwise_and_losses() {
        let mut rng = Prng::seed(11);
        let ins = [rand_mat(&mut rng, 2, 5), rand_mat(&mut rng, 2, 5)];
        fd_check(
            |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let s = g.add(a, b);
                let m = g.mul(s, a);
                let sc = g.scale(m, 0.7);
                let sg = g.sigmoid(sc);
                let ge = g.gelu(sg);
                let sp = g.softplus(ge);
                let d = g.sub(sp, b);
                let l1 = g.l1_loss(d, b);
                let l2 = g.mse_loss(d, b);
                let tot = g.add(l1, l2);
                g.sum_all(tot)
            },
            &ins,
        );
    }

    #[test]
    fn fd_softmax_layernorm() {
        let mut rng = Prng::seed(12);
        let ins = [rand_mat(&mut rng, 3, 4), rand_vec(&mut rng, 4), rand_vec(&mut rng, 4)];
        fd_check(
            |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let gamma = g.leaf(t[1].clone(), true);
                let beta = g.leaf(t[2].clone(), true);
                let s = g.softmax_rows(x);
                let ln = g.layernorm(s, gamma, beta);
                let sq = g.mul(ln, ln);
                g.mean_all(sq)
            },
            &ins,
        );
    }

    #[test]
    fn fd_conv_embedding_repeat() {
        let mut rng = Prng::seed(13);
        let ins = [
            rand_mat(&mut rng, 6, 3),  // conv input
            rand_mat(&mut rng, 5, 3),  // kernel
            rand_vec(&mut rng, 3),     // bias
            rand_mat(&mut rng, 4, 3),  // embedding table
        ];
        fd_check(
            |g, t| {
                let x = g.leaf(t[0].clone(), true);
                let w = g.leaf(t[1].clone(), true);
                let b = g.leaf(t[2].clone(), true);
                let table = g.leaf(t[3].clone(), true);
                let y = g.depthwise_conv1d(x, w, b);
                let e = g.embedding(table, &[0, 2, 2, 1, 3, 0]);
                let s = g.mul(y, e);
                let rep = g.repeat_rows(s, &[1, 2, 1, 3, 1, 2]);
                let sq = g.mul(rep, rep);
                g.mean_all(sq)
            },
            &ins,
        );
    }

    #[test]
    fn fd_shape_ops() {
        let mut rng = Prng::seed(14);
        let ins = [rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 2, 3), rand_vec(&mut rng, 4)];
        fd_check(
            |g, t| {
                let a = g.leaf(t[0].clone(), true);
                let b = g.leaf(t[1].clone(), true);
                let r = g.leaf(t[2].clone(), true);
                let cat = g.concat_rows(&[a, b]);
                let wide = g.concat_cols(&[cat, cat]);
                let sl = g.slice_cols(wide, 1, 4);
                let sr = g.slice_rows(sl, 1, 4);
                let tr = g.transpose(sr);
                let tr2 = g.transpose(tr);
                let biased = g.add_row(tr2, r);
                let mr = g.mean_rows(biased);
                let rs = g.reshape(mr, alloc::vec![1, 4]);
                let sq = g.mul(rs, rs);
                g.sum_all(sq)
            },
            &ins,
        );
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut rng = Prng::seed(15);
        let src_t = rand_mat(&mut rng, 2, 3);
        let replaced = rand_mat(&mut rng, 2, 3);

        let mut g = Graph::new();
        let src = g.leaf(src_t, true);
        let st = g.straight_through(src, replaced.clone());
        let tgt = g.constant(Tensor::zeros(&[2, 3]));
        let loss = g.mse_loss(st, tgt);
        g.backward(loss);

        // d(loss)/d(st) = 2*st/n; the same values must land on src.
        let expect: Vec<f64> = replaced.data().iter().map(|&v| 2.0 * v / 6.0).collect();
        let got = g.grad(src);
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(g.value(st).data(), replaced.data());
    }

    #[test]
    fn forward_deterministic_for_fixed_inputs() {
        let mut rng = Prng::seed(16);
        let x = rand_mat(&mut rng, 8, 8);
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(x.clone());
            let s = g.softmax_rows(a);
            let m = g.matmul(s, a);
            let l = g.gelu(m);
            g.value(l).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
