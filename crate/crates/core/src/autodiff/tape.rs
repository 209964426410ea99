use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvDims};
use crate::error::{Error, Result};

/// Dense row-major tensor of doubles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                context: "tensor buffer",
                expected: n,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix buffer size");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a 2-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `x (B×n) + b (n)` broadcast over rows.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    SoftmaxRows(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        dims: ConvDims,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Slice {
        src: NodeId,
        offset: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Node ids are indices, so
/// every node's inputs precede it by construction.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves of one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `∂loss/∂leaf`. Panics if `id` is not a leaf of the originating tape.
    pub fn get(&self, id: NodeId) -> &[f64] {
        self.grads[id.0]
            .as_deref()
            .expect("gradient requested for a non-leaf node")
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    fn zip_op(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        self.push(op, value, rg)
    }

    fn map_op(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let va = self.val(a);
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| f(*x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_op(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (rows, cols) = self.val(x).dims2();
        let vb = &self.val(bias).data;
        assert_eq!(vb.len(), cols, "bias length");
        let mut data = self.val(x).data.clone();
        for r in 0..rows {
            for (d, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(vb) {
                *d += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(Op::AddBias(x, bias), Tensor::matrix(rows, cols, data), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_op(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_op(a, Op::Offset(a), |x| x + c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.val(a).dims2();
        let (k2, n) = self.val(b).dims2();
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.val(a).data, &self.val(b).data, m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.val(a).dims2();
        let src = &self.val(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Op::Transpose(a), Tensor::matrix(n, m, out), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, Op::Softplus(a), kernels::softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, Op::Exp(a), f64::exp)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.val(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Row-wise softmax of a 2-D tensor, computed through log-sum-exp.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.val(a).dims2();
        let mut data = self.val(a).data.clone();
        for r in 0..rows {
            kernels::softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[a]);
        self.push(Op::SoftmaxRows(a), Tensor::matrix(rows, cols, data), rg)
    }

    /// Valid stride-1 convolution. `input: [B, Cin, H, W]`,
    /// `kernel: [Cout, Cin, K, K]`, `bias: [Cout]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> NodeId {
        let is = self.val(input).shape.clone();
        let ks = self.val(kernel).shape.clone();
        assert_eq!(is.len(), 4, "conv input must be [B,C,H,W]");
        assert_eq!(ks.len(), 4, "conv kernel must be [Cout,Cin,K,K]");
        assert_eq!(is[1], ks[1], "conv channel mismatch");
        assert_eq!(ks[2], ks[3], "square kernels only");
        assert!(is[2] >= ks[2] && is[3] >= ks[3], "kernel larger than input");
        let dims = ConvDims {
            batch: is[0],
            in_ch: is[1],
            height: is[2],
            width: is[3],
            out_ch: ks[0],
            kernel: ks[2],
        };
        assert_eq!(self.val(bias).len(), dims.out_ch, "conv bias length");
        let shape = vec![dims.batch, dims.out_ch, dims.out_h(), dims.out_w()];
        let mut out = vec![0.0; shape.iter().product()];
        kernels::conv2d_forward(
            &self.val(input).data,
            &self.val(kernel).data,
            &self.val(bias).data,
            dims,
            &mut out,
        );
        let rg = self.rg(&[input, kernel, bias]);
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
            Tensor { shape, data: out },
            rg,
        )
    }

    /// Non-overlapping max-pool over the last two axes of `[B, C, H, W]`.
    pub fn max_pool2d(&mut self, input: NodeId, size: usize) -> NodeId {
        let s = self.val(input).shape.clone();
        assert_eq!(s.len(), 4, "pool input must be [B,C,H,W]");
        assert!(size >= 1 && s[2] >= size && s[3] >= size, "pool window too large");
        let shape = vec![s[0], s[1], s[2] / size, s[3] / size];
        let mut out = vec![0.0; shape.iter().product()];
        let argmax =
            kernels::maxpool_forward(&self.val(input).data, s[0] * s[1], s[2], s[3], size, &mut out);
        let rg = self.rg(&[input]);
        self.push(
            Op::MaxPool2d { input, argmax },
            Tensor { shape, data: out },
            rg,
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.val(a);
        assert_eq!(shape.iter().product::<usize>(), v.len(), "reshape size");
        let value = Tensor {
            shape,
            data: v.data.clone(),
        };
        let rg = self.rg(&[a]);
        self.push(Op::Reshape(a), value, rg)
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.val(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.val(*p).dims2();
                assert_eq!(r, rows, "concat row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(*p).data[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(rows, total, data), rg)
    }

    /// `out[r] = a[index[r]]` for a 2-D `a`.
    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> NodeId {
        let (rows, cols) = self.val(a).dims2();
        let src = &self.val(a).data;
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            assert!(i < rows, "gather index out of range");
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[a]);
        self.push(
            Op::GatherRows(a, index.to_vec()),
            Tensor::matrix(index.len(), cols, data),
            rg,
        )
    }

    /// A contiguous run of `src`'s flat buffer, viewed with `shape`.
    pub fn slice(&mut self, src: NodeId, offset: usize, shape: Vec<usize>) -> NodeId {
        let n: usize = shape.iter().product();
        let v = self.val(src);
        assert!(offset + n <= v.len(), "slice out of range");
        let value = Tensor {
            shape,
            data: v.data[offset..offset + n].to_vec(),
        };
        let rg = self.rg(&[src]);
        self.push(Op::Slice { src, offset }, value, rg)
    }

    /// Reverse sweep from a scalar node. Every leaf gets an adjoint; leaves
    /// the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node has shape {:?}",
                lv.shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }

        let grads = self
            .nodes
            .iter()
            .zip(adj)
            .map(|(n, a)| match n.op {
                Op::Leaf => Some(a.unwrap_or_else(|| vec![0.0; n.value.len()])),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let accumulate = |adj: &mut [Option<Vec<f64>>], id: NodeId, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = adj[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(slot);
        };
        let out = &node.value.data;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                accumulate(adj, *b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                accumulate(adj, *b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.val(*a).data, &self.val(*b).data);
                accumulate(adj, *a, &|s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                accumulate(adj, *b, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let cols = self.val(*b).len();
                accumulate(adj, *x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                accumulate(adj, *b, &|s| {
                    for row in g.chunks(cols) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Scale(a, c) => {
                accumulate(adj, *a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
            }
            Op::Offset(a) | Op::Reshape(a) => {
                accumulate(adj, *a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).dims2();
                let n = self.val(*b).dims2().1;
                let (va, vb) = (&self.val(*a).data, &self.val(*b).data);
                // dA = G·Bᵀ, dB = Aᵀ·G
                accumulate(adj, *a, &|s| kernels::matmul_a_bt_acc(g, vb, m, n, k, s));
                accumulate(adj, *b, &|s| kernels::matmul_at_b_acc(va, g, m, k, n, s));
            }
            Op::Transpose(a) => {
                let (m, n) = self.val(*a).dims2();
                accumulate(adj, *a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                accumulate(adj, *a, &|s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                        *s += g * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(a) => {
                let va = &self.val(*a).data;
                accumulate(adj, *a, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let va = &self.val(*a).data;
                accumulate(adj, *a, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * kernels::sigmoid(*x);
                    }
                });
            }
            Op::Exp(a) => {
                accumulate(adj, *a, &|s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                        *s += g * y;
                    }
                });
            }
            Op::Sum(a) => {
                accumulate(adj, *a, &|s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::SoftmaxRows(a) => {
                let cols = node.value.shape[1];
                accumulate(adj, *a, &|s| {
                    for ((srow, grow), yrow) in
                        s.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let need_input = self.nodes[input.0].requires_grad;
                let mut gi = need_input.then(|| vec![0.0; self.val(*input).len()]);
                let mut gk = vec![0.0; self.val(*kernel).len()];
                let mut gb = vec![0.0; self.val(*bias).len()];
                kernels::conv2d_backward(
                    &self.val(*input).data,
                    &self.val(*kernel).data,
                    g,
                    *dims,
                    gi.as_deref_mut(),
                    &mut gk,
                    &mut gb,
                );
                if let Some(gi) = gi {
                    accumulate(adj, *input, &|s| s.iter_mut().zip(&gi).for_each(|(s, g)| *s += g));
                }
                accumulate(adj, *kernel, &|s| s.iter_mut().zip(&gk).for_each(|(s, g)| *s += g));
                accumulate(adj, *bias, &|s| s.iter_mut().zip(&gb).for_each(|(s, g)| *s += g));
            }
            Op::MaxPool2d { input, argmax } => {
                accumulate(adj, *input, &|s| {
                    for (g, &i) in g.iter().zip(argmax) {
                        s[i] += g;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape[0];
                let total = node.value.shape[1];
                let mut col = 0;
                for p in parts {
                    let w = self.val(*p).shape[1];
                    let start = col;
                    accumulate(adj, *p, &|s| {
                        for r in 0..rows {
                            for c in 0..w {
                                s[r * w + c] += g[r * total + start + c];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::GatherRows(a, index) => {
                let cols = node.value.shape[1];
                accumulate(adj, *a, &|s| {
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..cols {
                            s[i * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Slice { src, offset } => {
                accumulate(adj, *src, &|s| {
                    s[*offset..*offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, g)| *s += g);
                });
            }
        }
    }
}
