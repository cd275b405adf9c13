//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is the computation record for one forward pass: every operation
//! appends a node holding its output value and whatever the backward rule
//! needs. Nodes are appended in execution order, so the node list is already
//! topologically sorted and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is deliberately absent. The few places that need a row-wise
//! bias or a scalar multiplier use the explicit [`Graph::add_row_bias`] and
//! [`Graph::mul_scalar`] operations.

use std::cell::Cell;

use crate::error::{AtdError, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Shift,
    Tanh,
    Sigmoid,
    SoftmaxRows,
    Sum,
    Mean,
    Transpose,
    Reshape,
    Concat,
    AddRowBias,
    MulScalar,
    NormalizeRows,
    SubRowMax,
    RowMeans,
    Conv2d,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Shift,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::SoftmaxRows,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::AddRowBias,
        OpKind::MulScalar,
        OpKind::NormalizeRows,
        OpKind::SubRowMax,
        OpKind::RowMeans,
        OpKind::Conv2d,
        OpKind::CrossEntropy,
    ];

    /// Lower snake-case name, e.g. `softmax_rows`.
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Shift => "shift",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::MulScalar => "mul_scalar",
            OpKind::NormalizeRows => "normalize_rows",
            OpKind::SubRowMax => "sub_row_max",
            OpKind::RowMeans => "row_means",
            OpKind::Conv2d => "conv2d",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Elementwise operation selector for [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    AddRowBias(Var, Var),
    MulScalar(Var, Var),
    NormalizeRows { input: Var, inv_std: Vec<f64> },
    SubRowMax { input: Var, argmax: Vec<usize> },
    RowMeans(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    CrossEntropy { logits: Var, probs: Vec<f64>, label: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(..) => OpKind::Shift,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat(..) => OpKind::Concat,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::SubRowMax { .. } => OpKind::SubRowMax,
            Op::RowMeans(..) => OpKind::RowMeans,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of `kind` deliberately corrupted (its
/// upstream gradient is scaled by 1.5) for every graph created on this thread
/// inside `f`. Exists so gradient-check harnesses can prove they catch bugs.
#[doc(hidden)]
pub fn with_backward_fault<R>(kind: OpKind, f: impl FnOnce() -> R) -> R {
    struct Reset(Option<OpKind>);
    impl Drop for Reset {
        fn drop(&mut self) {
            BACKWARD_FAULT.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(BACKWARD_FAULT.with(|c| c.replace(Some(kind))));
    f()
}

/// The computation record. Confined to one thread; rebuilt for every forward
/// pass.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

pub type ComputationRecord = Graph;

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 1 {
        for (o, arow) in out.iter_mut().zip(a.chunks_exact(k)) {
            *o = arow.iter().zip(b).map(|(x, y)| x * y).sum();
        }
        return out;
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// One kernel tap `(co, ci, m, n)` with the output rows and columns whose
/// receptive field puts that tap inside the unpadded input.
struct Tap {
    k: usize,
    co: usize,
    ci: usize,
    m: usize,
    n: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    h1: usize,
    w1: usize,
    h2: usize,
    w2: usize,
    stride: usize,
    padding: usize,
}

impl Tap {
    /// Flat index of output `(co, i, cols.start)`.
    fn out_row(&self, i: usize) -> usize {
        (self.co * self.h2 + i) * self.w2 + self.cols.start
    }

    /// Flat index of the input read by output `(i, cols.start)`.
    fn in_row(&self, i: usize) -> usize {
        let ih = self.stride * i + self.m - self.padding;
        let iw = self.stride * self.cols.start + self.n - self.padding;
        (self.ci * self.h1 + ih) * self.w1 + iw
    }
}

/// Outputs `o < out_len` with `0 <= s*o + tap - p < in_len`.
fn tap_range(out_len: usize, in_len: usize, tap: usize, s: usize, p: usize) -> std::ops::Range<usize> {
    let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
    let hi = if in_len + p > tap { ((in_len + p - tap - 1) / s + 1).min(out_len) } else { 0 };
    lo..hi.max(lo)
}

#[allow(clippy::too_many_arguments)]
fn for_each_tap(
    cout: usize,
    cin: usize,
    f: usize,
    (h1, w1): (usize, usize),
    (h2, w2): (usize, usize),
    stride: usize,
    padding: usize,
    mut body: impl FnMut(&Tap),
) {
    for co in 0..cout {
        for ci in 0..cin {
            for m in 0..f {
                let rows = tap_range(h2, h1, m, stride, padding);
                for n in 0..f {
                    let cols = tap_range(w2, w1, n, stride, padding);
                    if rows.is_empty() || cols.is_empty() {
                        continue;
                    }
                    body(&Tap {
                        k: ((co * cin + ci) * f + m) * f + n,
                        co,
                        ci,
                        m,
                        n,
                        rows: rows.clone(),
                        cols,
                        h1,
                        w1,
                        h2,
                        w2,
                        stride,
                        padding,
                    });
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(AtdError::contract(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: BACKWARD_FAULT.with(Cell::get),
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        let value = Tensor::from_parts(shape, data).with_requires_grad(rg);
        self.push(value, op)
    }

    /// Adds a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.clear_grad();
        self.push(t, Op::Leaf)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient left by the last [`Graph::backward`], if the node takes part.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(AtdError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push_derived(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AtdError::shape(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(shape, out, op, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_derived(shape, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Dispatches one of the elementwise kinds; unary kinds ignore `b`.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| AtdError::contract("elementwise", "binary kind needs a second operand"));
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Scale(c) => Ok(self.scale(a, c)),
            Elementwise::Tanh => Ok(self.tanh(a)),
            Elementwise::Sigmoid => Ok(self.sigmoid(a)),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("softmax_rows", self.value(a))?;
        let x = self.data(a);
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(AtdError::NumericDomain {
                op: "softmax_rows",
                detail: format!("input entry {bad}"),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        Ok(self.push_derived(vec![m, n], out, Op::SoftmaxRows(a), &[a]))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push_derived(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.data(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.push_derived(Vec::new(), vec![s], Op::Mean(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.value(a))?;
        let out = transpose_raw(self.data(a), m, n);
        Ok(self.push_derived(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push_derived(shape.to_vec(), t.into_data(), Op::Reshape(a), &[a]))
    }

    /// Concatenates along the leading axis. Trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| AtdError::contract("concat", "nothing to concatenate"))?;
        if self.value(first).rank() == 0 {
            return Err(AtdError::contract("concat", "scalars have no leading axis"));
        }
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(AtdError::shape("concat", self.shape(first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push_derived(shape, out, Op::Concat(parts.to_vec()), parts))
    }

    /// `a[i, j] + bias[j]` for a matrix `a` and a vector `bias`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims("add_row_bias", self.value(a))?;
        if self.shape(bias) != [n] {
            return Err(AtdError::shape("add_row_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.data(bias);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(idx, &v)| v + b[idx % n])
            .collect();
        Ok(self.push_derived(vec![m, n], out, Op::AddRowBias(a, bias), &[a, bias]))
    }

    /// `a * s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = self.data(a).iter().map(|&v| v * sv).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(shape, out, Op::MulScalar(a, s), &[a, s]))
    }

    /// Standardizes each row of a matrix with its own mean and population
    /// variance: `(x - mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = matrix_dims("normalize_rows", self.value(a))?;
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mu) * r;
            }
            inv_std.push(r);
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(AtdError::NumericDomain {
                op: "normalize_rows",
                detail: "zero-variance row with eps = 0".into(),
            });
        }
        Ok(self.push_derived(vec![m, n], out, Op::NormalizeRows { input: a, inv_std }, &[a]))
    }

    /// `x[i, j] - max_k x[i, k]`. Every output row has maximum exactly 0.
    pub fn sub_row_max(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("sub_row_max", self.value(a))?;
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        let mut argmax = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let (best, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - max;
            }
            argmax.push(best);
        }
        Ok(self.push_derived(vec![m, n], out, Op::SubRowMax { input: a, argmax }, &[a]))
    }

    /// Mean of each row of a matrix, as a vector of length `rows`.
    pub fn row_means(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("row_means", self.value(a))?;
        let x = self.data(a);
        let out = (0..m)
            .map(|i| x[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        Ok(self.push_derived(vec![m], out, Op::RowMeans(a), &[a]))
    }

    /// 2-D convolution of a `C_in x H x W` input with a
    /// `C_out x C_in x F x F` kernel and one bias per output channel.
    /// Indices falling in the padding read as zero.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (cin, h1, w1) = match self.shape(input) {
            &[c, h, w] => (c, h, w),
            s => return Err(AtdError::contract("conv2d", format!("input must be C x H x W, got {s:?}"))),
        };
        let (cout, kcin, f) = match self.shape(kernel) {
            &[co, ci, fh, fw] if fh == fw => (co, ci, fh),
            s => return Err(AtdError::contract("conv2d", format!("kernel must be C_out x C_in x F x F, got {s:?}"))),
        };
        if kcin != cin {
            return Err(AtdError::shape("conv2d", self.shape(input), self.shape(kernel)));
        }
        if self.shape(bias) != [cout] {
            return Err(AtdError::shape("conv2d", self.shape(kernel), self.shape(bias)));
        }
        let (h2, w2) = crate::encoders::conv_out_dims(h1, w1, f, stride, padding)?;
        let x = self.data(input);
        let k = self.data(kernel);
        let b = self.data(bias);
        let mut out = vec![0.0; cout * h2 * w2];
        for co in 0..cout {
            out[co * h2 * w2..(co + 1) * h2 * w2].fill(b[co]);
        }
        for_each_tap(cout, cin, f, (h1, w1), (h2, w2), stride, padding, |t| {
            let kv = k[t.k];
            for i in t.rows.clone() {
                let orow = &mut out[t.out_row(i)..][..t.cols.len()];
                let xrow = &x[t.in_row(i)..];
                if stride == 1 {
                    orow.iter_mut().zip(xrow).for_each(|(o, &xv)| *o += kv * xv);
                } else {
                    for (o, jj) in orow.iter_mut().zip(0..) {
                        *o += kv * xrow[jj * stride];
                    }
                }
            }
        });
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        };
        Ok(self.push_derived(vec![cout, h2, w2], out, op, &[input, kernel, bias]))
    }

    /// `-log softmax(logits)[label]` for a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.data(logits);
        if self.value(logits).rank() != 1 || x.len() < 2 {
            return Err(AtdError::contract(
                "cross_entropy",
                format!("logits must be a vector of >= 2 classes, got {:?}", self.shape(logits)),
            ));
        }
        if label >= x.len() {
            return Err(AtdError::contract(
                "cross_entropy",
                format!("label {label} out of range for {} classes", x.len()),
            ));
        }
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = x.iter().map(|v| (v - max).exp()).sum();
        let lse = max + total.ln();
        let probs = x.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - x[label];
        Ok(self.push_derived(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy { logits, probs, label },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that requires
    /// a gradient and lies upstream of `loss` holds d(loss)/d(node); gradients
    /// from multiple uses of a node are summed. Previous gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(AtdError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if !self.value(loss).requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(mut dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if self.fault == Some(node.op.kind()) {
                dy.iter_mut().for_each(|g| *g *= 1.5);
            }
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if node.value.requires_grad() {
                    node.value.set_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = nodes[idx].value.data();
        let val = |v: Var| nodes[v.0].value.data();
        // Accumulation buffer for `v`, or None when `v` takes no gradient.
        let slot = |v: Var, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            let t = &nodes[v.0].value;
            if t.requires_grad() {
                f(grads[v.0].get_or_insert_with(|| vec![0.0; t.len()]));
            }
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                slot(*a, grads, &mut |ga| {
                    // dA = dY * B^T
                    for i in 0..m {
                        let grow = &mut ga[i * k..(i + 1) * k];
                        for j in 0..n {
                            let d = dy[i * n + j];
                            for (p, g) in grow.iter_mut().enumerate() {
                                *g += d * bv[p * n + j];
                            }
                        }
                    }
                });
                slot(*b, grads, &mut |gb| {
                    // dB = A^T * dY
                    for i in 0..m {
                        let drow = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for (g, d) in gb[p * n..(p + 1) * n].iter_mut().zip(drow) {
                                *g += aip * d;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                slot(*a, grads, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                slot(*b, grads, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                slot(*a, grads, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                slot(*b, grads, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                slot(*a, grads, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                slot(*b, grads, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                slot(*a, grads, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d));
            }
            Op::Shift(a) | Op::Reshape(a) => {
                slot(*a, grads, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Tanh(a) => {
                slot(*a, grads, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                slot(*a, grads, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = nodes[idx].value.shape()[1];
                slot(*a, grads, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                slot(*a, grads, &mut |g| g.iter_mut().for_each(|g| *g += dy[0]));
            }
            Op::Mean(a) => {
                slot(*a, grads, &mut |g| {
                    let s = dy[0] / g.len() as f64;
                    g.iter_mut().for_each(|g| *g += s);
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                slot(*a, grads, &mut |g| {
                    // dy is n x m
                    let d = transpose_raw(dy, n, m);
                    g.iter_mut().zip(d).for_each(|(g, v)| *g += v);
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    let src = &dy[offset..offset + len];
                    slot(*p, grads, &mut |g| g.iter_mut().zip(src).for_each(|(g, d)| *g += d));
                    offset += len;
                }
            }
            Op::AddRowBias(a, bias) => {
                let n = nodes[bias.0].value.len();
                slot(*a, grads, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                slot(*bias, grads, &mut |g| {
                    for row in dy.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s)[0];
                let av = val(*a);
                slot(*a, grads, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += sv * d));
                slot(*s, grads, &mut |g| g[0] += av.iter().zip(dy).map(|(a, d)| a * d).sum::<f64>());
            }
            Op::NormalizeRows { input, inv_std } => {
                let n = nodes[idx].value.shape()[1];
                slot(*input, grads, &mut |g| {
                    for (((gr, yr), dr), &r) in g.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)).zip(inv_std) {
                        let mean_d = dr.iter().sum::<f64>() / n as f64;
                        let mean_dy = dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gr[j] += r * (dr[j] - mean_d - yr[j] * mean_dy);
                        }
                    }
                });
            }
            Op::SubRowMax { input, argmax } => {
                let n = nodes[idx].value.shape()[1];
                slot(*input, grads, &mut |g| {
                    for ((gr, dr), &am) in g.chunks_mut(n).zip(dy.chunks(n)).zip(argmax) {
                        let total: f64 = dr.iter().sum();
                        gr.iter_mut().zip(dr).for_each(|(g, d)| *g += d);
                        gr[am] -= total;
                    }
                });
            }
            Op::RowMeans(a) => {
                let n = nodes[a.0].value.shape()[1];
                slot(*a, grads, &mut |g| {
                    for (gr, &d) in g.chunks_mut(n).zip(dy) {
                        gr.iter_mut().for_each(|g| *g += d / n as f64);
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => self.conv2d_backward(idx, dy, *input, *kernel, *bias, *stride, *padding, grads),
            Op::CrossEntropy { logits, probs, label } => {
                slot(*logits, grads, &mut |g| {
                    for (j, (g, p)) in g.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        *g += dy[0] * (p - onehot);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        idx: usize,
        dy: &[f64],
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.nodes[input.0].value.shape();
        let (cin, h1, w1) = (xs[0], xs[1], xs[2]);
        let ks = self.nodes[kernel.0].value.shape();
        let (cout, f) = (ks[0], ks[2]);
        let ys = self.nodes[idx].value.shape();
        let (h2, w2) = (ys[1], ys[2]);
        let x = self.nodes[input.0].value.data();
        let k = self.nodes[kernel.0].value.data();

        let want_x = self.nodes[input.0].value.requires_grad();
        let want_k = self.nodes[kernel.0].value.requires_grad();
        let mut gx = want_x.then(|| vec![0.0; x.len()]);
        let mut gk = want_k.then(|| vec![0.0; k.len()]);

        for_each_tap(cout, cin, f, (h1, w1), (h2, w2), stride, padding, |t| {
            let kv = k[t.k];
            let mut acc = 0.0;
            for i in t.rows.clone() {
                let drow = &dy[t.out_row(i)..][..t.cols.len()];
                let start = t.in_row(i);
                if stride == 1 {
                    let w = drow.len();
                    if let Some(gx) = gx.as_mut() {
                        gx[start..start + w].iter_mut().zip(drow).for_each(|(g, &d)| *g += kv * d);
                    }
                    acc += x[start..start + w].iter().zip(drow).map(|(a, b)| a * b).sum::<f64>();
                    continue;
                }
                if let Some(gx) = gx.as_mut() {
                    for (jj, &d) in drow.iter().enumerate() {
                        gx[start + jj * stride] += kv * d;
                    }
                }
                for (jj, &d) in drow.iter().enumerate() {
                    acc += x[start + jj * stride] * d;
                }
            }
            if let Some(gk) = gk.as_mut() {
                gk[t.k] += acc;
            }
        });

        let mut add = |v: Var, d: Vec<f64>| {
            let len = d.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            g.iter_mut().zip(d).for_each(|(g, v)| *g += v);
        };
        if let Some(gx) = gx {
            add(input, gx);
        }
        if let Some(gk) = gk {
            add(kernel, gk);
        }
        if self.nodes[bias.0].value.requires_grad() {
            let plane = h2 * w2;
            let gb = (0..cout).map(|co| dy[co * plane..(co + 1) * plane].iter().sum()).collect();
            add(bias, gb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 2]).unwrap());
        let b = g.constant(t(&[2, 4], &[1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[3, 4]);
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let s = g.elementwise(Elementwise::Sigmoid, z, None).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));

        let x = g.constant(t(&[2], &[0.0, 1.0]));
        let th = g.elementwise(Elementwise::Tanh, x, None).unwrap();
        assert_eq!(g.value(th).data()[0], 0.0);
        assert!((g.value(th).data()[1] - 0.761_594_155_955_764_9).abs() < 1e-15);

        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let m = g.elementwise(Elementwise::Mul, a, Some(b)).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 10.0, 18.0]);

        let bad = g.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.add(a, bad), Err(AtdError::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 0.0, 2f64.ln(), f64::NEG_INFINITY]));
        assert!(matches!(g.softmax_rows(a), Err(AtdError::NumericDomain { .. })));

        let a = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let s = g.softmax_rows(a).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = g.constant(t(&[1, 2], &[0.0, 2f64.ln()]));
        let s = g.softmax_rows(a).unwrap();
        assert!((g.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(AtdError::Contract { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn sub_row_max_rows_peak_at_zero() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 5.0, -2.0, 0.3, 0.1, 0.2]));
        let s = g.sub_row_max(a).unwrap();
        for i in 0..2 {
            let row = g.value(s).row(i);
            assert_eq!(row.iter().copied().fold(f64::NEG_INFINITY, f64::max), 0.0);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_gradient() {
        let mut g = Graph::new();
        let z = g.param(t(&[2], &[0.0, 0.0]));
        let l = g.cross_entropy(z, 0).unwrap();
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        g.backward(l).unwrap();
        assert_eq!(g.grad(z).unwrap(), &[-0.5, 0.5]);
        assert!(g.cross_entropy(z, 2).is_err());
    }

    #[test]
    fn fault_hook_is_scoped() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(t(&[1], &[0.3]));
            let y = g.tanh(x);
            let l = g.sum(y);
            g.backward(l).unwrap();
            g.grad(x).unwrap()[0]
        };
        let clean = run();
        let broken = with_backward_fault(OpKind::Tanh, run);
        assert!((broken - 1.5 * clean).abs() < 1e-15);
        assert_eq!(run(), clean);
    }
}
