//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The tape is rebuilt from scratch for every training step: leaves are
//! registered with [`Tape::param`] (tracked) or [`Tape::constant`]
//! (untracked), operations append nodes in topological order, and
//! [`Tape::backward`] accumulates gradients for every tracked node from a
//! scalar loss. All arithmetic is 64-bit.

pub mod gradcheck;
mod kernels;

pub use kernels::sigmoid;

use kernels::ConvDims;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: String, got: Vec<usize> },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Scalar payload; panics on non-scalar tensors.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    /// rhs may broadcast as a suffix of lhs
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    /// rhs may broadcast as a suffix of lhs
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Silu { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Sin { a: usize },
    Cos { a: usize },
    Square { a: usize },
    LayerNorm { a: usize },
    SoftmaxLastDim { a: usize },
    ConcatLastDim { parts: Vec<usize> },
    Reshape { a: usize },
    TransposeLast2 { a: usize },
    Conv2d { input: usize, kernel: usize, dims: ConvDims },
    ConvT2d { input: usize, kernel: usize, dims: ConvDims },
    Mean { a: usize },
    Sum { a: usize },
    Mse { a: usize, b: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation: nodes in topological order (parents precede children).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYERNORM_EPS: f64 = 1e-14;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> TensorRef {
        self.nodes.push(Node { op, value, requires_grad, grad: None });
        TensorRef(self.nodes.len() - 1)
    }

    fn req(&self, r: TensorRef) -> bool {
        self.nodes[r.0].requires_grad
    }

    /// Tracked leaf: receives a gradient during [`Tape::backward`].
    pub fn param(&mut self, t: &Tensor) -> TensorRef {
        self.push(Op::Leaf, t.clone(), true)
    }

    /// Untracked leaf: participates in the forward pass only.
    pub fn constant(&mut self, t: &Tensor) -> TensorRef {
        self.push(Op::Leaf, t.clone(), false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> TensorRef {
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0].value
    }

    /// Gradient accumulated at `r` by the last [`Tape::backward`] call.
    pub fn grad(&self, r: TensorRef) -> Option<&[f64]> {
        self.nodes[r.0].grad.as_deref()
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0, m, k, n }, Tensor { shape: vec![m, n], data }, req))
    }

    /// Batched matmul over a shared leading dimension: `[B,m,k] x [B,k,n]`.
    pub fn bmm(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            data.extend(kernels::matmul(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(
            Op::Bmm { a: a.0, b: b.0, batch, m, k, n },
            Tensor { shape: vec![batch, m, n], data },
            req,
        ))
    }

    fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
        rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
    }

    /// Elementwise sum; `b` may broadcast as a trailing-suffix shape of `a`.
    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if !Self::broadcast_ok(sa, sb) {
            return Err(TensorError::ShapeMismatch { op: "add", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let bl = self.value(b).len().max(1);
        let mut data = self.value(a).data().to_vec();
        let db = self.value(b).data();
        for chunk in data.chunks_mut(bl) {
            for (x, y) in chunk.iter_mut().zip(db) {
                *x += y;
            }
        }
        let shape = sa.to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, Tensor { shape, data }, req))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "sub", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = sa.to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, Tensor { shape, data }, req))
    }

    /// Hadamard product; `b` may broadcast as a trailing-suffix shape of `a`.
    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if !Self::broadcast_ok(sa, sb) {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let bl = self.value(b).len().max(1);
        let mut data = self.value(a).data().to_vec();
        let db = self.value(b).data();
        for chunk in data.chunks_mut(bl) {
            for (x, y) in chunk.iter_mut().zip(db) {
                *x *= y;
            }
        }
        let shape = sa.to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, Tensor { shape, data }, req))
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> TensorRef {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(a);
        self.push(Op::Scale { a: a.0, c }, Tensor { shape, data }, req)
    }

    fn unary(
        &mut self,
        a: TensorRef,
        op: fn(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> TensorRef {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(a);
        self.push(op(a.0), Tensor { shape, data }, req)
    }

    pub fn silu(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |a| Op::Silu { a }, |x| x * sigmoid(x))
    }

    pub fn sigmoid_op(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |a| Op::Sigmoid { a }, sigmoid)
    }

    pub fn exp(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |a| Op::Exp { a }, f64::exp)
    }

    pub fn sin(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |a| Op::Sin { a }, f64::sin)
    }

    pub fn cos(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |a| Op::Cos { a }, f64::cos)
    }

    pub fn square(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |a| Op::Square { a }, |x| x * x)
    }

    /// Normalize the last dimension to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, a: TensorRef) -> Result<TensorRef> {
        let shape = self.value(a).shape().to_vec();
        let d = *shape.last().ok_or(TensorError::BadShape {
            op: "layernorm",
            expected: "rank >= 1".into(),
            got: shape.clone(),
        })?;
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for (row_out, row) in data.chunks_mut(d).zip(src.chunks(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (o, x) in row_out.iter_mut().zip(row) {
                *o = (x - mean) * rstd;
            }
        }
        let req = self.req(a);
        Ok(self.push(Op::LayerNorm { a: a.0 }, Tensor { shape, data }, req))
    }

    pub fn softmax_lastdim(&mut self, a: TensorRef) -> Result<TensorRef> {
        let shape = self.value(a).shape().to_vec();
        let d = *shape.last().ok_or(TensorError::BadShape {
            op: "softmax_lastdim",
            expected: "rank >= 1".into(),
            got: shape.clone(),
        })?;
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for (row_out, row) in data.chunks_mut(d).zip(src.chunks(d)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, x) in row_out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let req = self.req(a);
        Ok(self.push(Op::SoftmaxLastDim { a: a.0 }, Tensor { shape, data }, req))
    }

    /// Concatenate along the last dimension; all parts must agree on the
    /// leading dimensions.
    pub fn concat_lastdim(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat_lastdim",
                expected: "at least one input".into(),
                got: vec![],
            });
        }
        let lead = self.value(parts[0]).shape();
        let lead = lead[..lead.len() - 1].to_vec();
        let mut last_total = 0;
        let mut lasts = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_lastdim",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lasts.push(*s.last().unwrap());
            last_total += s.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * last_total);
        for r in 0..rows {
            for (&p, &d) in parts.iter().zip(&lasts) {
                data.extend_from_slice(&self.value(p).data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(last_total);
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Op::ConcatLastDim { parts: parts.iter().map(|p| p.0).collect() },
            Tensor { shape, data },
            req,
        ))
    }

    pub fn reshape(&mut self, a: TensorRef, new_shape: &[usize]) -> Result<TensorRef> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.value(a).shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        let req = self.req(a);
        Ok(self.push(Op::Reshape { a: a.0 }, Tensor { shape: new_shape.to_vec(), data }, req))
    }

    /// Swap the last two dimensions.
    pub fn transpose_last2(&mut self, a: TensorRef) -> Result<TensorRef> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::BadShape {
                op: "transpose_last2",
                expected: "rank >= 2".into(),
                got: shape,
            });
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let data = transpose_batched(self.value(a).data(), r, c);
        let mut new_shape = shape;
        let ln = new_shape.len();
        new_shape.swap(ln - 2, ln - 1);
        let req = self.req(a);
        Ok(self.push(Op::TransposeLast2 { a: a.0 }, Tensor { shape: new_shape, data }, req))
    }

    /// Strided 2-D convolution, NHWC input `[B,H,W,Ci]`, kernel `[kh,kw,Ci,Co]`,
    /// symmetric zero padding.
    pub fn conv2d_stride(
        &mut self,
        input: TensorRef,
        kernel: TensorRef,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        let mk = |op| TensorError::ShapeMismatch { op, lhs: si.to_vec(), rhs: sk.to_vec() };
        if si.len() != 4 || sk.len() != 4 || si[3] != sk[2] {
            return Err(mk("conv2d_stride"));
        }
        let dims = ConvDims::conv(si[0], si[1], si[2], si[3], sk[0], sk[1], sk[3], stride, pad)
            .ok_or_else(|| mk("conv2d_stride"))?;
        let data = kernels::conv2d(self.value(input).data(), self.value(kernel).data(), dims);
        let req = self.req(input) || self.req(kernel);
        Ok(self.push(
            Op::Conv2d { input: input.0, kernel: kernel.0, dims },
            Tensor { shape: vec![dims.batch, dims.out_h, dims.out_w, dims.c_out], data },
            req,
        ))
    }

    /// Transposed (fractionally strided) 2-D convolution, NHWC input
    /// `[B,H,W,Ci]`, kernel `[kh,kw,Ci,Co]`; output spatial size is
    /// `(H-1)*stride + kh - 2*pad`.
    pub fn transposed_conv2d(
        &mut self,
        input: TensorRef,
        kernel: TensorRef,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        let mk = |op| TensorError::ShapeMismatch { op, lhs: si.to_vec(), rhs: sk.to_vec() };
        if si.len() != 4 || sk.len() != 4 || si[3] != sk[2] {
            return Err(mk("transposed_conv2d"));
        }
        let dims =
            ConvDims::conv_transposed(si[0], si[1], si[2], si[3], sk[0], sk[1], sk[3], stride, pad)
                .ok_or_else(|| mk("transposed_conv2d"))?;
        // Forward pass of the transposed conv is the input-gradient of the
        // dual convolution; that dual sees the swapped kernel layout.
        let dual = dual_dims(dims);
        let kswap = swap_kernel_axes(self.value(kernel).data(), dims.kh, dims.kw, dims.c_in, dims.c_out);
        let data = kernels::conv2d_input_grad(self.value(input).data(), &kswap, dual);
        let req = self.req(input) || self.req(kernel);
        Ok(self.push(
            Op::ConvT2d { input: input.0, kernel: kernel.0, dims },
            Tensor { shape: vec![dims.batch, dims.out_h, dims.out_w, dims.c_out], data },
            req,
        ))
    }

    /// Mean of all elements (scalar output).
    pub fn mean_all(&mut self, a: TensorRef) -> TensorRef {
        let n = self.value(a).len() as f64;
        let v = self.value(a).data().iter().sum::<f64>() / n;
        let req = self.req(a);
        self.push(Op::Mean { a: a.0 }, Tensor::scalar(v), req)
    }

    /// Sum of all elements (scalar output).
    pub fn sum_all(&mut self, a: TensorRef) -> TensorRef {
        let v = self.value(a).data().iter().sum::<f64>();
        let req = self.req(a);
        self.push(Op::Sum { a: a.0 }, Tensor::scalar(v), req)
    }

    /// Mean squared error between two same-shape tensors (scalar output).
    pub fn mse(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mse", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let n = self.value(a).len() as f64;
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Mse { a: a.0, b: b.0 }, Tensor::scalar(v), req))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulate `d loss / d node` for every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i);
        }
        Ok(())
    }

    fn take_grad(&mut self, i: usize) -> Vec<f64> {
        // Leave the accumulated gradient in place for callers; clone is
        // bounded by the node count of a single step's tape.
        self.nodes[i].grad.clone().unwrap()
    }

    fn accum(&mut self, target: usize, contrib: &[f64]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.len();
        let g = self.nodes[target].grad.get_or_insert_with(|| vec![0.0; len]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Accumulate into a broadcast-suffix parent by folding leading dims.
    fn accum_broadcast(&mut self, target: usize, contrib: &[f64]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.len();
        let g = self.nodes[target].grad.get_or_insert_with(|| vec![0.0; len]);
        for chunk in contrib.chunks(len.max(1)) {
            for (gi, ci) in g.iter_mut().zip(chunk) {
                *gi += ci;
            }
        }
    }

    fn propagate(&mut self, i: usize) {
        let g = match &self.nodes[i].op {
            Op::Leaf => return,
            _ => self.take_grad(i),
        };
        // Move the op out temporarily to appease the borrow checker on Vec parents.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b, m, k, n } => {
                if self.nodes[*a].requires_grad {
                    let da = kernels::matmul_nt(&g, self.nodes[*b].value.data(), *m, *n, *k);
                    self.accum(*a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let db = kernels::matmul_tn(self.nodes[*a].value.data(), &g, *m, *k, *n);
                    self.accum(*b, &db);
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (mk, kn, mn) = (m * k, k * n, m * n);
                if self.nodes[*a].requires_grad {
                    let db = self.nodes[*b].value.data();
                    let mut da = Vec::with_capacity(batch * mk);
                    for i in 0..*batch {
                        da.extend(kernels::matmul_nt(
                            &g[i * mn..(i + 1) * mn],
                            &db[i * kn..(i + 1) * kn],
                            *m,
                            *n,
                            *k,
                        ));
                    }
                    self.accum(*a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let da_v = self.nodes[*a].value.data();
                    let mut db = Vec::with_capacity(batch * kn);
                    for i in 0..*batch {
                        db.extend(kernels::matmul_tn(
                            &da_v[i * mk..(i + 1) * mk],
                            &g[i * mn..(i + 1) * mn],
                            *m,
                            *k,
                            *n,
                        ));
                    }
                    self.accum(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accum(*a, &g);
                self.accum_broadcast(*b, &g);
            }
            Op::Sub { a, b } => {
                self.accum(*a, &g);
                if self.nodes[*b].requires_grad {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accum(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let bl = self.nodes[*b].value.len().max(1);
                    let bd = self.nodes[*b].value.data();
                    let mut da = g.clone();
                    for chunk in da.chunks_mut(bl) {
                        for (x, y) in chunk.iter_mut().zip(bd) {
                            *x *= y;
                        }
                    }
                    self.accum(*a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let ad = self.nodes[*a].value.data();
                    let contrib: Vec<f64> = g.iter().zip(ad).map(|(gi, ai)| gi * ai).collect();
                    self.accum_broadcast(*b, &contrib);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accum(*a, &da);
            }
            Op::Silu { a } => {
                let da: Vec<f64> = self.nodes[*a]
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&x, gi)| {
                        let s = sigmoid(x);
                        gi * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accum(*a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&y, gi)| gi * y * (1.0 - y))
                    .collect();
                self.accum(*a, &da);
            }
            Op::Exp { a } => {
                let da: Vec<f64> =
                    self.nodes[i].value.data().iter().zip(&g).map(|(&y, gi)| gi * y).collect();
                self.accum(*a, &da);
            }
            Op::Sin { a } => {
                let da: Vec<f64> = self.nodes[*a]
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&x, gi)| gi * x.cos())
                    .collect();
                self.accum(*a, &da);
            }
            Op::Cos { a } => {
                let da: Vec<f64> = self.nodes[*a]
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&x, gi)| -gi * x.sin())
                    .collect();
                self.accum(*a, &da);
            }
            Op::Square { a } => {
                let da: Vec<f64> = self.nodes[*a]
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&x, gi)| gi * 2.0 * x)
                    .collect();
                self.accum(*a, &da);
            }
            Op::LayerNorm { a } => {
                let d = *self.nodes[i].value.shape().last().unwrap();
                let y = self.nodes[i].value.data();
                let x = self.nodes[*a].value.data();
                let mut da = vec![0.0; x.len()];
                for ((row_da, row_y), (row_x, row_g)) in da
                    .chunks_mut(d)
                    .zip(y.chunks(d))
                    .zip(x.chunks(d).zip(g.chunks(d)))
                {
                    let mean = row_x.iter().sum::<f64>() / d as f64;
                    let var =
                        row_x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    let g_mean = row_g.iter().sum::<f64>() / d as f64;
                    let gy_mean =
                        row_g.iter().zip(row_y).map(|(gi, yi)| gi * yi).sum::<f64>() / d as f64;
                    for ((o, gi), yi) in row_da.iter_mut().zip(row_g).zip(row_y) {
                        *o = rstd * (gi - g_mean - yi * gy_mean);
                    }
                }
                self.accum(*a, &da);
            }
            Op::SoftmaxLastDim { a } => {
                let d = *self.nodes[i].value.shape().last().unwrap();
                let y = self.nodes[i].value.data();
                let mut da = vec![0.0; y.len()];
                for ((row_da, row_y), row_g) in da.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d))
                {
                    let dot: f64 = row_y.iter().zip(row_g).map(|(yi, gi)| yi * gi).sum();
                    for ((o, yi), gi) in row_da.iter_mut().zip(row_y).zip(row_g) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accum(*a, &da);
            }
            Op::ConcatLastDim { parts } => {
                let lasts: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.nodes[p].value.shape().last().unwrap())
                    .collect();
                let total: usize = lasts.iter().sum();
                let rows = g.len() / total;
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    let d = lasts[pi];
                    let offset: usize = lasts[..pi].iter().sum();
                    let mut dp = vec![0.0; rows * d];
                    for r in 0..rows {
                        dp[r * d..(r + 1) * d]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + d]);
                    }
                    self.accum(p, &dp);
                }
            }
            Op::Reshape { a } => {
                self.accum(*a, &g);
            }
            Op::TransposeLast2 { a } => {
                let s = self.nodes[i].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let da = transpose_batched(&g, r, c);
                self.accum(*a, &da);
            }
            Op::Conv2d { input, kernel, dims } => {
                if self.nodes[*input].requires_grad {
                    let di =
                        kernels::conv2d_input_grad(&g, self.nodes[*kernel].value.data(), *dims);
                    self.accum(*input, &di);
                }
                if self.nodes[*kernel].requires_grad {
                    let dk = kernels::conv2d_kernel_grad(self.nodes[*input].value.data(), &g, *dims);
                    self.accum(*kernel, &dk);
                }
            }
            Op::ConvT2d { input, kernel, dims } => {
                let dual = dual_dims(*dims);
                if self.nodes[*input].requires_grad {
                    let kswap = swap_kernel_axes(
                        self.nodes[*kernel].value.data(),
                        dims.kh,
                        dims.kw,
                        dims.c_in,
                        dims.c_out,
                    );
                    let di = kernels::conv2d(&g, &kswap, dual);
                    self.accum(*input, &di);
                }
                if self.nodes[*kernel].requires_grad {
                    let dk_swapped =
                        kernels::conv2d_kernel_grad(&g, self.nodes[*input].value.data(), dual);
                    let dk =
                        swap_kernel_axes(&dk_swapped, dims.kh, dims.kw, dims.c_out, dims.c_in);
                    self.accum(*kernel, &dk);
                }
            }
            Op::Mean { a } => {
                let n = self.nodes[*a].value.len() as f64;
                let da = vec![g[0] / n; self.nodes[*a].value.len()];
                self.accum(*a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.nodes[*a].value.len()];
                self.accum(*a, &da);
            }
            Op::Mse { a, b } => {
                let n = self.nodes[*a].value.len() as f64;
                let diffs: Vec<f64> = self.nodes[*a]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[*b].value.data())
                    .map(|(x, y)| 2.0 * (x - y) * g[0] / n)
                    .collect();
                self.accum(*a, &diffs);
                if self.nodes[*b].requires_grad {
                    let neg: Vec<f64> = diffs.iter().map(|x| -x).collect();
                    self.accum(*b, &neg);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn transpose_batched(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (ob, ib) in out.chunks_mut(r * c).zip(data.chunks(r * c)) {
        for i in 0..r {
            for j in 0..c {
                ob[j * r + i] = ib[i * c + j];
            }
        }
    }
    out
}

/// Kernel axis swap `[kh,kw,a,b] -> [kh,kw,b,a]`.
fn swap_kernel_axes(k: &[f64], kh: usize, kw: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; k.len()];
    for t in 0..kh * kw {
        let base = t * a * b;
        for x in 0..a {
            for y in 0..b {
                out[base + y * a + x] = k[base + x * b + y];
            }
        }
    }
    out
}

/// The ordinary convolution whose input-gradient realizes the forward pass
/// of the transposed convolution with dims `d`.
fn dual_dims(d: ConvDims) -> ConvDims {
    ConvDims {
        batch: d.batch,
        in_h: d.out_h,
        in_w: d.out_w,
        c_in: d.c_out,
        kh: d.kh,
        kw: d.kw,
        c_out: d.c_in,
        stride: d.stride,
        pad: d.pad,
        out_h: d.in_h,
        out_w: d.in_w,
    }
}
