//! Eager reverse-mode differentiation over a recorded operation list.
//!
//! Every forward op computes its value immediately and appends a node. Nodes
//! are only ever appended, so a [`Var`] index stays valid for the life of the
//! graph and the node list is already in topological order for the backward
//! sweep.

use std::collections::HashMap;

use super::param::{Param, ParamId};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const MLP_CHUNK_ROWS: usize = 2048;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    MaxCols(usize, Vec<usize>),
    MeanRows(usize),
    SumAll(usize),
    MeanAll(usize),
    LayerNormRows(usize, T),
    L2NormalizeRows(usize, T),
    Transpose(usize),
    Reshape(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Mlp { x: usize, w1: usize, b1: usize, w2: usize, b2: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Abs(..) => "abs",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::MaxCols(..) => "max_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder. One graph per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.id()).and_then(|v| self.wrt(*v))
    }

    pub fn by_id(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}

fn rc(shape: &[usize]) -> (usize, usize) {
    let c = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if c == 0 { 0 } else { n / c }, c)
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn stable_softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn add_into<T: Real>(dst: &mut Option<Tensor<T>>, src: Tensor<T>) {
    match dst {
        Some(d) => {
            for (a, b) in d.data_mut().iter_mut().zip(src.data()) {
                *a = *a + *b;
            }
        }
        None => *dst = Some(src),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by all node values on the tape.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum::<usize>() * std::mem::size_of::<T>()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// (rows, cols) of the 2-D view of `v`.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        rc(self.shape(v))
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), node });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(node))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a parameter once per graph; later calls return the same node.
    pub fn param(&mut self, p: &Param<T>) -> Result<Var> {
        if let Some(v) = self.params.get(&p.id()) {
            return Ok(*v);
        }
        let v = self.leaf(p.value().clone())?;
        self.params.insert(p.id(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n, T::zero());
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::MatMul(a.0, b.0), rg)
    }

    /// a·bᵀ for a[m×k], b[n×k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", format!("{sa:?} x {sb:?}ᵀ")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nt(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n, T::zero());
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::MatMulNt(a.0, b.0), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Mul(a.0, b.0), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Div(a.0, b.0), rg)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "minimum", |x, y| if y < x { y } else { x })?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Minimum(a.0, b.0), rg)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "maximum", |x, y| if y > x { y } else { x })?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::Maximum(a.0, b.0), rg)
    }

    fn row_broadcast(&self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.dims(a);
        if self.value(b).len() != c {
            return Err(shape_err(name, format!("row vector of {} vs {} columns", self.value(b).len(), c)));
        }
        Ok((r, c))
    }

    /// a[r×c] + b broadcast over rows (b has c elements).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = self.row_broadcast(a, b, "add_row")?;
        let bv = self.value(b).data().to_vec();
        let ta = self.value(a);
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + bv[i % c]).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::AddRow(a.0, b.0), rg)
    }

    /// a[r×c] ∘ b broadcast over rows (b has c elements).
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = self.row_broadcast(a, b, "mul_row")?;
        let bv = self.value(b).data().to_vec();
        let ta = self.value(a);
        let data = ta.data().iter().enumerate().map(|(i, &x)| x * bv[i % c]).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::MulRow(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Scale(a.0, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::AddScalar(a.0), rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a.0]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.0), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.0), stable_sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a.0), stable_softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a.0), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Ln(a.0), |x| x.ln())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a.0), |x| x.abs())
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rc(ta.shape());
        let mut data = ta.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s = s + *x;
            }
            for x in row.iter_mut() {
                *x = *x / s;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::SoftmaxRows(a.0), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rc(ta.shape());
        let mut data = ta.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::LogSoftmaxRows(a.0), rg)
    }

    /// Row-wise maximum, r×c → r×1. Ties resolve to the lowest column.
    pub fn max_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rc(ta.shape());
        if c == 0 {
            return Err(shape_err("max_cols", "zero columns"));
        }
        let mut arg = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let row = ta.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let out = Tensor::new(vec![r, 1], data)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::MaxCols(a.0, arg), rg)
    }

    /// Column means, r×c → 1×c.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rc(ta.shape());
        if r == 0 {
            return Err(shape_err("mean_rows", "zero rows"));
        }
        let mut data = vec![T::zero(); c];
        for i in 0..r {
            for (d, &x) in data.iter_mut().zip(ta.row(i)) {
                *d = *d + x;
            }
        }
        let inv = T::one() / T::c(r as f64);
        data.iter_mut().for_each(|x| *x = *x * inv);
        let out = Tensor::new(vec![1, c], data)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::MeanRows(a.0), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean_all", "empty tensor"));
        }
        let s = t.data().iter().copied().sum::<T>() / T::c(t.len() as f64);
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::MeanAll(a.0), rg)
    }

    /// Per-row standardization (x − mean) / sqrt(var + eps), no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rc(ta.shape());
        let mut data = ta.data().to_vec();
        let inv_c = T::one() / T::c(c as f64);
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_c;
            let inv_std = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv_std);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::LayerNormRows(a.0, eps), rg)
    }

    /// x / sqrt(|x|² + eps) per row.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rc(ta.shape());
        let mut data = ta.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let n = (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|x| *x = *x / n);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::L2NormalizeRows(a.0, eps), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rc(ta.shape());
        let src = ta.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Transpose(a.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Reshape(a.0), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rc(ta.shape());
        if start + len > r {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {r}")));
        }
        let out = Tensor::new(vec![len, c], ta.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::SliceRows(a.0, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rc(ta.shape());
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::SliceCols(a.0, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let r = self.dims(*first).0;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = self.dims(*p);
            if pr != r {
                return Err(shape_err("concat_cols", format!("row counts {pr} vs {r}")));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::ConcatCols(ids), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let c = self.dims(*first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (pr, pc) = self.dims(*p);
            if pc != c {
                return Err(shape_err("concat_rows", format!("column counts {pc} vs {c}")));
            }
            rows += pr;
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::ConcatRows(ids), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rc(ta.shape());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(shape_err("gather_rows", format!("index {i} out of {r} rows")));
            }
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(&[a.0]);
        self.push(out, Op::GatherRows(a.0, idx.to_vec()), rg)
    }

    /// Two-layer perceptron over the last axis: relu(x·w1 + b1)·w2 + b2.
    ///
    /// The hidden activations are computed in row blocks and never stored;
    /// the backward pass recomputes them block by block.
    pub fn mlp(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (rows, din) = rc(&sx);
        let (s1, s2) = (self.shape(w1), self.shape(w2));
        if s1.len() != 2 || s2.len() != 2 || s1[0] != din || s2[0] != s1[1] {
            return Err(shape_err("mlp", format!("x {sx:?}, w1 {s1:?}, w2 {s2:?}")));
        }
        let (hid, dout) = (s1[1], s2[1]);
        if self.value(b1).len() != hid || self.value(b2).len() != dout {
            return Err(shape_err("mlp", "bias length"));
        }
        let (xv, w1v, b1v, w2v, b2v) =
            (self.value(x).data(), self.value(w1).data(), self.value(b1).data(), self.value(w2).data(), self.value(b2).data());
        let mut out = vec![T::zero(); rows * dout];
        let mut hidden = vec![T::zero(); MLP_CHUNK_ROWS.min(rows.max(1)) * hid];
        let mut start = 0;
        while start < rows {
            let n = MLP_CHUNK_ROWS.min(rows - start);
            let h = &mut hidden[..n * hid];
            for row in h.chunks_mut(hid) {
                row.copy_from_slice(b1v);
            }
            gemm_nn(&xv[start * din..(start + n) * din], w1v, h, n, din, hid, T::one());
            h.iter_mut().for_each(|v| {
                if *v <= T::zero() {
                    *v = T::zero()
                }
            });
            let o = &mut out[start * dout..(start + n) * dout];
            for row in o.chunks_mut(dout) {
                row.copy_from_slice(b2v);
            }
            gemm_nn(h, w2v, o, n, hid, dout, T::one());
            start += n;
        }
        let mut shape = sx;
        if let Some(last) = shape.last_mut() {
            *last = dout;
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x.0, w1.0, b1.0, w2.0, b2.0]);
        self.push(value, Op::Mlp { x: x.0, w1: w1.0, b1: b1.0, w2: w2.0, b2: b2.0 }, rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    /// Gradient buffer of `to`, zero-initialized on first use; `None` when
    /// the node needs no gradient.
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], to: usize) -> Option<&'g mut [T]> {
        if !self.nodes[to].requires_grad {
            return None;
        }
        let slot = &mut grads[to];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[to].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: usize, g: Tensor<T>) {
        if self.nodes[to].requires_grad {
            add_into(&mut grads[to], g);
        }
    }

    fn like(&self, i: usize, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("same numel")
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let gd = g.data();
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[*a].requires_grad {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(gd, val(*b), &mut da, m, n, k, T::zero());
                    self.send(grads, *a, self.like(*a, da));
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(val(*a), gd, &mut db, k, m, n, T::zero());
                    self.send(grads, *b, self.like(*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.nodes[*a].requires_grad {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(gd, val(*b), &mut da, m, n, k, T::zero());
                    self.send(grads, *a, self.like(*a, da));
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(gd, val(*a), &mut db, n, m, k, T::zero());
                    self.send(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.send(grads, *a, self.like(*a, gd.iter().zip(vb).map(|(&d, &x)| d * x).collect()));
                self.send(grads, *b, self.like(*b, gd.iter().zip(va).map(|(&d, &x)| d * x).collect()));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.send(grads, *a, self.like(*a, gd.iter().zip(vb).map(|(&d, &q)| d / q).collect()));
                let db = gd.iter().zip(va).zip(vb).map(|((&d, &p), &q)| -d * p / (q * q)).collect();
                self.send(grads, *b, self.like(*b, db));
            }
            Op::AddRow(a, b) => {
                self.send(grads, *a, g.clone());
                let c = val(*b).len();
                let mut db = vec![T::zero(); c];
                for (k, &d) in gd.iter().enumerate() {
                    db[k % c] = db[k % c] + d;
                }
                self.send(grads, *b, self.like(*b, db));
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = vb.len();
                let da = gd.iter().enumerate().map(|(k, &d)| d * vb[k % c]).collect();
                self.send(grads, *a, self.like(*a, da));
                let mut db = vec![T::zero(); c];
                for (k, &d) in gd.iter().enumerate() {
                    db[k % c] = db[k % c] + d * va[k];
                }
                self.send(grads, *b, self.like(*b, db));
            }
            Op::Scale(a, s) => self.send(grads, *a, g.map(|d| d * *s)),
            Op::AddScalar(a) => self.send(grads, *a, g.clone()),
            Op::Relu(a) => {
                let va = val(*a);
                let da = gd.iter().zip(va).map(|(&d, &x)| if x > T::zero() { d } else { T::zero() }).collect();
                self.send(grads, *a, self.like(*a, da));
            }
            Op::Sigmoid(a) => {
                let da = gd.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                self.send(grads, *a, self.like(*a, da));
            }
            Op::Softplus(a) => {
                let da = gd.iter().zip(val(*a)).map(|(&d, &x)| d * stable_sigmoid(x)).collect();
                self.send(grads, *a, self.like(*a, da));
            }
            Op::Exp(a) => {
                let da = gd.iter().zip(y).map(|(&d, &e)| d * e).collect();
                self.send(grads, *a, self.like(*a, da));
            }
            Op::Ln(a) => {
                let da = gd.iter().zip(val(*a)).map(|(&d, &x)| d / x).collect();
                self.send(grads, *a, self.like(*a, da));
            }
            Op::Abs(a) => {
                let da = gd
                    .iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| {
                        if x > T::zero() {
                            d
                        } else if x < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.send(grads, *a, self.like(*a, da));
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let pick_b: Vec<bool> = match &node.op {
                    Op::Minimum(..) => val(*a).iter().zip(val(*b)).map(|(&x, &z)| z < x).collect(),
                    _ => val(*a).iter().zip(val(*b)).map(|(&x, &z)| z > x).collect(),
                };
                let da = gd.iter().zip(&pick_b).map(|(&d, &pb)| if pb { T::zero() } else { d }).collect();
                let db = gd.iter().zip(&pick_b).map(|(&d, &pb)| if pb { d } else { T::zero() }).collect();
                self.send(grads, *a, self.like(*a, da));
                self.send(grads, *b, self.like(*b, db));
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = rc(node.value.shape());
                let mut da = vec![T::zero(); r * c];
                for row in 0..r {
                    let s = row * c..(row + 1) * c;
                    let dot: T = gd[s.clone()].iter().zip(&y[s.clone()]).map(|(&d, &p)| d * p).sum();
                    for k in s {
                        da[k] = y[k] * (gd[k] - dot);
                    }
                }
                self.send(grads, *a, self.like(*a, da));
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = rc(node.value.shape());
                let mut da = vec![T::zero(); r * c];
                for row in 0..r {
                    let s = row * c..(row + 1) * c;
                    let total: T = gd[s.clone()].iter().copied().sum();
                    for k in s {
                        da[k] = gd[k] - y[k].exp() * total;
                    }
                }
                self.send(grads, *a, self.like(*a, da));
            }
            Op::MaxCols(a, arg) => {
                let c = rc(self.nodes[*a].value.shape()).1;
                let mut da = vec![T::zero(); self.nodes[*a].value.len()];
                for (row, &j) in arg.iter().enumerate() {
                    da[row * c + j] = gd[row];
                }
                self.send(grads, *a, self.like(*a, da));
            }
            Op::MeanRows(a) => {
                let (r, c) = rc(self.nodes[*a].value.shape());
                let inv = T::one() / T::c(r as f64);
                let da = (0..r * c).map(|k| gd[k % c] * inv).collect();
                self.send(grads, *a, self.like(*a, da));
            }
            Op::SumAll(a) => {
                let n = self.nodes[*a].value.len();
                self.send(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.len();
                let v = gd[0] / T::c(n as f64);
                self.send(grads, *a, self.like(*a, vec![v; n]));
            }
            Op::LayerNormRows(a, eps) => {
                let xa = val(*a);
                let (r, c) = rc(node.value.shape());
                let inv_c = T::one() / T::c(c as f64);
                let mut da = vec![T::zero(); r * c];
                for row in 0..r {
                    let s = row * c..(row + 1) * c;
                    let x = &xa[s.clone()];
                    let mean = x.iter().copied().sum::<T>() * inv_c;
                    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                    let inv_std = T::one() / (var + *eps).sqrt();
                    let dy = &gd[s.clone()];
                    let yy = &y[s.clone()];
                    let mean_dy = dy.iter().copied().sum::<T>() * inv_c;
                    let mean_dyy = dy.iter().zip(yy).map(|(&d, &v)| d * v).sum::<T>() * inv_c;
                    for (k, idx) in s.enumerate() {
                        da[idx] = inv_std * (dy[k] - mean_dy - yy[k] * mean_dyy);
                    }
                }
                self.send(grads, *a, self.like(*a, da));
            }
            Op::L2NormalizeRows(a, eps) => {
                let xa = val(*a);
                let (r, c) = rc(node.value.shape());
                let mut da = vec![T::zero(); r * c];
                for row in 0..r {
                    let s = row * c..(row + 1) * c;
                    let n = (xa[s.clone()].iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                    let dot: T = gd[s.clone()].iter().zip(&y[s.clone()]).map(|(&d, &v)| d * v).sum();
                    for k in s {
                        da[k] = (gd[k] - y[k] * dot) / n;
                    }
                }
                self.send(grads, *a, self.like(*a, da));
            }
            Op::Transpose(a) => {
                let (r, c) = rc(self.nodes[*a].value.shape());
                let mut da = vec![T::zero(); r * c];
                for ii in 0..r {
                    for jj in 0..c {
                        da[ii * c + jj] = gd[jj * r + ii];
                    }
                }
                self.send(grads, *a, self.like(*a, da));
            }
            Op::Reshape(a) => self.send(grads, *a, self.like(*a, gd.to_vec())),
            Op::SliceRows(a, start) => {
                let c = rc(self.nodes[*a].value.shape()).1;
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (d, s) in da[start * c..start * c + gd.len()].iter_mut().zip(gd) {
                        *d = *d + *s;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = rc(self.nodes[*a].value.shape());
                let len = rc(node.value.shape()).1;
                if let Some(da) = self.grad_slot(grads, *a) {
                    for row in 0..r {
                        for (d, s) in da[row * c + start..row * c + start + len].iter_mut().zip(&gd[row * len..(row + 1) * len]) {
                            *d = *d + *s;
                        }
                    }
                }
            }
            Op::ConcatCols(ids) => {
                let (r, total) = rc(node.value.shape());
                let mut off = 0;
                for &p in ids {
                    let pc = rc(self.nodes[p].value.shape()).1;
                    let mut dp = Vec::with_capacity(r * pc);
                    for row in 0..r {
                        dp.extend_from_slice(&gd[row * total + off..row * total + off + pc]);
                    }
                    self.send(grads, p, self.like(p, dp));
                    off += pc;
                }
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &p in ids {
                    let n = self.nodes[p].value.len();
                    self.send(grads, p, self.like(p, gd[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = rc(self.nodes[*a].value.shape()).1;
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (k, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            da[src * c + j] = da[src * c + j] + gd[k * c + j];
                        }
                    }
                }
            }
            Op::Mlp { x, w1, b1, w2, b2 } => {
                self.backprop_mlp(gd, *x, *w1, *b1, *w2, *b2, grads);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_mlp(&self, gd: &[T], x: usize, w1: usize, b1: usize, w2: usize, b2: usize, grads: &mut [Option<Tensor<T>>]) {
        let (rows, din) = rc(self.nodes[x].value.shape());
        let hid = self.nodes[w1].value.shape()[1];
        let dout = self.nodes[w2].value.shape()[1];
        let (xv, w1v, b1v, w2v) =
            (self.nodes[x].value.data(), self.nodes[w1].value.data(), self.nodes[b1].value.data(), self.nodes[w2].value.data());
        let need_x = self.nodes[x].requires_grad;
        let mut dx = if need_x { vec![T::zero(); rows * din] } else { Vec::new() };
        let mut dw1 = vec![T::zero(); din * hid];
        let mut db1 = vec![T::zero(); hid];
        let mut dw2 = vec![T::zero(); hid * dout];
        let mut db2 = vec![T::zero(); dout];
        let cap = MLP_CHUNK_ROWS.min(rows.max(1));
        let mut pre = vec![T::zero(); cap * hid];
        let mut h = vec![T::zero(); cap * hid];
        let mut dh = vec![T::zero(); cap * hid];
        let mut start = 0;
        while start < rows {
            let n = MLP_CHUNK_ROWS.min(rows - start);
            let xs = &xv[start * din..(start + n) * din];
            let dy = &gd[start * dout..(start + n) * dout];
            let (pre, h, dh) = (&mut pre[..n * hid], &mut h[..n * hid], &mut dh[..n * hid]);
            for row in pre.chunks_mut(hid) {
                row.copy_from_slice(b1v);
            }
            gemm_nn(xs, w1v, pre, n, din, hid, T::one());
            for (hv, &p) in h.iter_mut().zip(pre.iter()) {
                *hv = if p > T::zero() { p } else { T::zero() };
            }
            gemm_tn(h, dy, &mut dw2, hid, n, dout, T::one());
            for row in dy.chunks(dout) {
                for (acc, &d) in db2.iter_mut().zip(row) {
                    *acc = *acc + d;
                }
            }
            gemm_nt(dy, w2v, dh, n, dout, hid, T::zero());
            for (d, &p) in dh.iter_mut().zip(pre.iter()) {
                if p <= T::zero() {
                    *d = T::zero();
                }
            }
            gemm_tn(xs, dh, &mut dw1, din, n, hid, T::one());
            for row in dh.chunks(hid) {
                for (acc, &d) in db1.iter_mut().zip(row) {
                    *acc = *acc + d;
                }
            }
            if need_x {
                gemm_nt(dh, w1v, &mut dx[start * din..(start + n) * din], n, hid, din, T::zero());
            }
            start += n;
        }
        if need_x {
            self.send(grads, x, self.like(x, dx));
        }
        self.send(grads, w1, self.like(w1, dw1));
        self.send(grads, b1, self.like(b1, db1));
        self.send(grads, w2, self.like(w2, dw2));
        self.send(grads, b2, self.like(b2, db2));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![1000.0, 0.0]])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        let e = std::f64::consts::E;
        assert!((v[2] - e / (1.0 + e)).abs() < 1e-15);
        assert!((v[2] - 0.73106).abs() < 1e-5 && (v[3] - 0.26894).abs() < 1e-5);
        // e^-1000 underflows to exactly 0 in f64; the stabilized form stays finite
        assert_eq!(v[4], 1.0);
        assert!(v[5] >= 0.0 && v[5] < 1e-300);
    }

    #[test]
    fn sigmoid_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 3], vec![0.0, 2.0, -50.0]).unwrap()).unwrap();
        let y = g.sigmoid(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 0.88080).abs() < 1e-5);
        assert!(v[2] > 0.0);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        match g.ln(x) {
            Err(Error::NonFinite { op, node }) => {
                assert_eq!(op, "ln");
                assert_eq!(node, 1);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn param_registered_once() {
        let p = Param::new(Tensor::<f64>::zeros(&[2, 2]));
        let mut g = Graph::new();
        let a = g.param(&p).unwrap();
        let b = g.param(&p).unwrap();
        assert_eq!(a, b);
        let s = g.sum_all(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(&p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn max_cols_routes_gradient_to_first_max() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[vec![1.0, 3.0, 3.0], vec![-1.0, -2.0, -5.0]])).unwrap();
        let m = g.max_cols(x).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, -1.0]);
        let s = g.sum_all(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[vec![1.0, 2.0]])).unwrap();
        assert!(g.backward(x).is_err());
    }
}
