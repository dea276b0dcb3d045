//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every op appends a node holding its value and the handles of its parents,
//! so parents always precede children and reverse accumulation is a single
//! backwards sweep. Values are never mutated after they are recorded.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::tensor::{broadcast_shape, numel, Shape, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Binary and unary elementwise operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
    Neg,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Abs,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(
            self,
            Elementwise::Add
                | Elementwise::Sub
                | Elementwise::Mul
                | Elementwise::Div
                | Elementwise::Maximum
                | Elementwise::Minimum
        )
    }

    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Div => "div",
            Elementwise::Maximum => "maximum",
            Elementwise::Minimum => "minimum",
            Elementwise::Neg => "neg",
            Elementwise::Relu => "relu",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Exp => "exp",
            Elementwise::Ln => "ln",
            Elementwise::Abs => "abs",
        }
    }
}

/// How an operand index is derived from an output index under broadcasting.
#[derive(Debug, Clone)]
enum BIndex {
    Same,
    /// Operand is a trailing block repeated across the output.
    Mod(usize),
    Table(Vec<usize>),
}

impl BIndex {
    fn build(out: &[usize], input: &[usize]) -> BIndex {
        if out == input {
            return BIndex::Same;
        }
        let n_in = numel(input);
        let trimmed: &[usize] = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            &input[lead.min(input.len().saturating_sub(1))..]
        };
        if n_in == 1 || (trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed) {
            return BIndex::Mod(n_in);
        }
        // General stride walk.
        let rank = out.len();
        let offset = rank - input.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..input.len()).rev() {
            strides[d + offset] = if input[d] == 1 { 0 } else { acc };
            acc *= input[d];
        }
        let total = numel(out);
        let mut table = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        for _ in 0..total {
            table.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < out[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        BIndex::Table(table)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            BIndex::Same => i,
            BIndex::Mod(n) => i % n,
            BIndex::Table(t) => t[i],
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary { kind: Elementwise, a: Var, b: Var, ia: BIndex, ib: BIndex },
    Unary { kind: Elementwise, x: Var },
    Scale { x: Var, c: f64 },
    Offset { x: Var },
    MatMul { a: Var, b: Var, shared_b: bool },
    Transpose { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Sum { x: Var },
    Reshape { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    IndexRows { x: Var, rows: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    Element { x: Var, index: usize },
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recorded computation. One tape per forward pass; not shared across threads.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` is not a
    /// tracked ancestor of the root.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but zeros for non-ancestors.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked input: receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked input: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Applies a binary (`b` given) or unary (`b` absent) elementwise op.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var, TensorError> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => self.unary(kind, a),
            _ => Err(TensorError::Invalid("elementwise: operand count does not match op kind")),
        }
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = kind.name();
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(name, sa, sb)?;
        let ia = BIndex::build(&out_shape, sa);
        let ib = BIndex::build(&out_shape, sb);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let f: fn(f64, f64) -> f64 = match kind {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            Elementwise::Div => |x, y| x / y,
            Elementwise::Maximum => |x, y| if x >= y { x } else { y },
            Elementwise::Minimum => |x, y| if x <= y { x } else { y },
            _ => unreachable!(),
        };
        let data: Vec<f64> = match (&ia, &ib) {
            (BIndex::Same, BIndex::Same) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(va[ia.at(i)], vb[ib.at(i)])).collect(),
        };
        check_finite(name, &data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary { kind, a, b, ia, ib }, tracked))
    }

    fn unary(&mut self, kind: Elementwise, x: Var) -> Result<Var, TensorError> {
        let f: fn(f64) -> f64 = match kind {
            Elementwise::Neg => |v| -v,
            Elementwise::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Elementwise::Sigmoid => math::sigmoid,
            Elementwise::Exp => math::exp,
            Elementwise::Ln => math::ln,
            Elementwise::Abs => |v: f64| v.abs(),
            _ => unreachable!(),
        };
        let value = self.value(x);
        let data: Vec<f64> = value.data().iter().map(|&v| f(v)).collect();
        check_finite(kind.name(), &data)?;
        let shape = value.shape().to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Unary { kind, x }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Elementwise::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Elementwise::Maximum, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Elementwise::Minimum, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Elementwise::Neg, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Elementwise::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Elementwise::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Elementwise::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Elementwise::Ln, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Elementwise::Abs, x)
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(x);
        let data: Vec<f64> = value.data().iter().map(|&v| v * c).collect();
        check_finite("scale", &data)?;
        let shape = value.shape().to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Scale { x, c }, tracked))
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(x);
        let data: Vec<f64> = value.data().iter().map(|&v| v + c).collect();
        check_finite("add_scalar", &data)?;
        let shape = value.shape().to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Offset { x }, tracked))
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.neg(x)?;
        self.add_scalar(n, 1.0)
    }

    /// Matrix product over the last two dims. Leading dims must agree, or `b`
    /// may be rank 2 and shared across all of `a`'s batches.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(mismatch());
        }
        let batch = numel(lead_a);
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let boff = if shared_b { 0 } else { bi * k * n };
            gemm_acc(
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        check_finite("matmul", &out)?;
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, shared_b }, tracked))
    }

    /// Swaps the last two dims.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::InvalidAxis { op: "transpose", axis: 1, rank: s.len() });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for b in 0..batch {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = v[off + i * c + j];
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([c, r]);
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose { x }, tracked))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, rank: s.len() });
        }
        let out = softmax_values(self.value(x).data(), &s, axis);
        check_finite("softmax", &out)?;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax { x, axis }, tracked))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().unwrap();
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for (row, orow) in v.chunks(cols).zip(out.chunks_mut(cols)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + math::ln(row.iter().map(|&z| math::exp(z - mx)).sum::<f64>());
            for (o, &z) in orow.iter_mut().zip(row) {
                *o = z - lse;
            }
        }
        check_finite("log_softmax", &out)?;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(s, out), Op::LogSoftmax { x }, tracked))
    }

    /// Normalizes each vector along the last dim to zero mean, unit variance
    /// (epsilon 1e-5). Affine scale/shift is applied separately.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().unwrap();
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        let mut rstd = Vec::with_capacity(v.len() / cols);
        for (row, orow) in v.chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            for (o, &z) in orow.iter_mut().zip(row) {
                *o = (z - mean) * r;
            }
            rstd.push(r);
        }
        check_finite("layer_norm", &out)?;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(s, out), Op::LayerNorm { x, rstd }, tracked))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total: f64 = self.value(x).data().iter().sum();
        check_finite("sum", &[total])?;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }, tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape { x }, tracked))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(TensorError::IndexOutOfBounds { op: "slice_cols", index: start + len, len: *s.last().unwrap_or(&0) });
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(vec![rows, len], out), Op::SliceCols { x, start }, tracked))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.shape(parts[0]).to_vec();
        let rows = first[0];
        let mut total_cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch { op: "concat_cols", lhs: first.clone(), rhs: s.to_vec() });
            }
            total_cols += s[1];
        }
        let mut out = vec![0.0; rows * total_cols];
        let mut off = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let v = self.value(p).data();
            for r in 0..rows {
                out[r * total_cols + off..r * total_cols + off + c].copy_from_slice(&v[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total_cols], out),
            Op::ConcatCols { parts: parts.to_vec() },
            tracked,
        ))
    }

    /// Gathers rows of a rank-2 tensor (repeats allowed).
    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidAxis { op: "index_rows", axis: 0, rank: s.len() });
        }
        if rows.is_empty() {
            return Err(TensorError::Invalid("index_rows: empty index list"));
        }
        let cols = s[1];
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= s[0] {
                return Err(TensorError::IndexOutOfBounds { op: "index_rows", index: r, len: s[0] });
            }
            out.extend_from_slice(&v[r * cols..(r + 1) * cols]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), cols], out),
            Op::IndexRows { x, rows: rows.to_vec() },
            tracked,
        ))
    }

    /// `out[r] = x[r, cols[r]]` for a rank-2 `x`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || cols.len() != s[0] {
            return Err(TensorError::ShapeMismatch { op: "pick", lhs: s, rhs: vec![cols.len()] });
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= s[1] {
                return Err(TensorError::IndexOutOfBounds { op: "pick", index: c, len: s[1] });
            }
            out.push(v[r * s[1] + c]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(vec![cols.len()], out), Op::Pick { x, cols: cols.to_vec() }, tracked))
    }

    /// Single element at flat `index`, shape `[1]`.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let v = self.value(x).data();
        if index >= v.len() {
            return Err(TensorError::IndexOutOfBounds { op: "element", index, len: v.len() });
        }
        let value = Tensor::scalar(v[index]);
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Element { x, index }, tracked))
    }

    /// Inverted dropout with drop probability `p`. `p == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid("dropout: probability must be in [0, 1)"));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let value = self.value(x);
        let mask: Vec<f64> = (0..value.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let data: Vec<f64> = value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = value.shape().to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Dropout { x, mask }, tracked))
    }

    /// Reverse accumulation from a scalar `root`.
    ///
    /// The tape is left untouched, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_shape = self.shape(root);
        if numel(root_shape) != 1 {
            return Err(TensorError::NonScalarRoot { shape: root_shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.tracked(root) {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..=root.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.tracked(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, ia, ib } => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        let (x, y) = (va[ia.at(i)], vb[ib.at(i)]);
                        let d = match kind {
                            Elementwise::Add | Elementwise::Sub => 1.0,
                            Elementwise::Mul => y,
                            Elementwise::Div => 1.0 / y,
                            Elementwise::Maximum => (x >= y) as u8 as f64,
                            Elementwise::Minimum => (x <= y) as u8 as f64,
                            _ => unreachable!(),
                        };
                        ga[ia.at(i)] += gi * d;
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let (x, y) = (va[ia.at(i)], vb[ib.at(i)]);
                        let d = match kind {
                            Elementwise::Add => 1.0,
                            Elementwise::Sub => -1.0,
                            Elementwise::Mul => x,
                            Elementwise::Div => -x / (y * y),
                            Elementwise::Maximum => (x < y) as u8 as f64,
                            Elementwise::Minimum => (x > y) as u8 as f64,
                            _ => unreachable!(),
                        };
                        gb[ib.at(i)] += gi * d;
                    }
                }
            }
            Op::Unary { kind, x } => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Elementwise::Neg => -1.0,
                            Elementwise::Relu => (vx[i] > 0.0) as u8 as f64,
                            Elementwise::Sigmoid => out[i] * (1.0 - out[i]),
                            Elementwise::Exp => out[i],
                            Elementwise::Ln => 1.0 / vx[i],
                            Elementwise::Abs => {
                                if vx[i] > 0.0 {
                                    1.0
                                } else if vx[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            _ => unreachable!(),
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }
            Op::Offset { x } | Op::Reshape { x } => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::MatMul { a, b, shared_b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = numel(&sa[..sa.len() - 2]);
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for bi in 0..batch {
                        let boff = if *shared_b { 0 } else { bi * k * n };
                        gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb[boff..boff + k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for bi in 0..batch {
                        let boff = if *shared_b { 0 } else { bi * k * n };
                        gemm_tn_acc(
                            &va[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Transpose { x } => {
                let s = node.value.shape();
                // node is [.., c, r]; input is [.., r, c]
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = numel(&s[..s.len() - 2]);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for bt in 0..batch {
                        let off = bt * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[off + i * c + j] += g[off + j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                if let Some(gx) = self.accumulate(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                let p = base + l * inner;
                                dot += g[p] * out[p];
                            }
                            for l in 0..len {
                                let p = base + l * inner;
                                gx[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let cols = *node.value.shape().last().unwrap();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((grow, orow), xrow) in g.chunks(cols).zip(out.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((xg, &gi), &lo) in xrow.iter_mut().zip(grow).zip(orow) {
                            *xg += gi - math::exp(lo) * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let cols = *node.value.shape().last().unwrap();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (r, ((grow, yrow), xrow)) in
                        g.chunks(cols).zip(out.chunks(cols)).zip(gx.chunks_mut(cols)).enumerate()
                    {
                        let gmean = grow.iter().sum::<f64>() / cols as f64;
                        let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for ((xg, &gi), &yi) in xrow.iter_mut().zip(grow).zip(yrow) {
                            *xg += rstd[r] * (gi - gmean - yi * gy);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let (rows, cols) = (s[0], s[1]);
                let len = node.value.shape()[1];
                if let Some(gx) = self.accumulate(grads, *x) {
                    for r in 0..rows {
                        for c in 0..len {
                            gx[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(gp) = self.accumulate(grads, p) {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::IndexRows { x, rows } => {
                let cols = node.value.shape()[1];
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            gx[r * cols + c] += g[i * cols + c];
                        }
                    }
                }
            }
            Op::Pick { x, cols } => {
                let width = self.shape(*x)[1];
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (r, &c) in cols.iter().enumerate() {
                        gx[r * width + c] += g[r];
                    }
                }
            }
            Op::Element { x, index } => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    gx[*index] += g[0];
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
        }
    }
}

/// Softmax of raw values along `axis` (max-subtracted).
pub fn softmax_values(v: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; v.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for l in 0..len {
                mx = mx.max(v[base + l * inner]);
            }
            let mut total = 0.0;
            for l in 0..len {
                let e = math::exp(v[base + l * inner] - mx);
                out[base + l * inner] = e;
                total += e;
            }
            for l in 0..len {
                out[base + l * inner] /= total;
            }
        }
    }
    out
}
