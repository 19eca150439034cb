//! Minimal dense reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node holding its
//! forward value and the inputs its backward rule needs, so node order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Tapes are rebuilt per forward pass.
//!
//! Binary elementwise ops broadcast the right operand over leading
//! dimensions: after dropping its leading 1s, its shape must be a suffix of
//! the left operand's shape.
//!
//! Subgradients: `relu` and `hinge` pass gradient iff the input is strictly
//! positive; `l2_norm_rows` uses `g·x / max(‖x‖, 1e-12)` and `normalize_rows`
//! divides by the same clamped norm.

mod check;
mod exp;
mod tensor;

pub use check::{grad_check, relative_error, GradCheckReport, KINK_TOLERANCE, RELATIVE_ERROR_FLOOR};
pub use tensor::Tensor;

use crate::{Error, Result};

const NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Kind of recorded operation, used in diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddScalar,
    Transpose,
    RowSoftmax,
    LogSoftmaxRows,
    Relu,
    Hinge,
    Square,
    MeanRows,
    MeanAll,
    SumAll,
    L2NormRows,
    NormalizeRows,
    ConcatRows,
    GatherRows,
    ScatterMeanRows,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::AddScalar,
        OpKind::Transpose,
        OpKind::RowSoftmax,
        OpKind::LogSoftmaxRows,
        OpKind::Relu,
        OpKind::Hinge,
        OpKind::Square,
        OpKind::MeanRows,
        OpKind::MeanAll,
        OpKind::SumAll,
        OpKind::L2NormRows,
        OpKind::NormalizeRows,
        OpKind::ConcatRows,
        OpKind::GatherRows,
        OpKind::ScatterMeanRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::Transpose => "transpose",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::Relu => "relu",
            OpKind::Hinge => "hinge",
            OpKind::Square => "square",
            OpKind::MeanRows => "mean_rows",
            OpKind::MeanAll => "mean_all",
            OpKind::SumAll => "sum_all",
            OpKind::L2NormRows => "l2_norm_rows",
            OpKind::NormalizeRows => "normalize_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::ScatterMeanRows => "scatter_mean_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    RowSoftmax(Var),
    LogSoftmaxRows(Var),
    Relu(Var),
    Hinge(Var),
    Square(Var),
    MeanRows(Var),
    MeanAll(Var),
    SumAll(Var),
    L2NormRows(Var),
    NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<u32>),
    ScatterMeanRows(Var, Vec<u32>, Vec<u32>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Transpose(..) => OpKind::Transpose,
            Op::RowSoftmax(..) => OpKind::RowSoftmax,
            Op::LogSoftmaxRows(..) => OpKind::LogSoftmaxRows,
            Op::Relu(..) => OpKind::Relu,
            Op::Hinge(..) => OpKind::Hinge,
            Op::Square(..) => OpKind::Square,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::MeanAll(..) => OpKind::MeanAll,
            Op::SumAll(..) => OpKind::SumAll,
            Op::L2NormRows(..) => OpKind::L2NormRows,
            Op::NormalizeRows(..) => OpKind::NormalizeRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ScatterMeanRows(..) => OpKind::ScatterMeanRows,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode tape. Single-threaded; build one per sample.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    corrupted: Option<OpKind>,
}

/// `C (m×n) = alpha·A (m×k)·B (k×n) + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    alpha: f64,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass slices whose extents cover the strided
    // m×k, k×n and m×n (row stride n, col stride 1) views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_len(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    let trimmed: Vec<usize> = rhs.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= lhs.len() && lhs[lhs.len() - trimmed.len()..] == trimmed[..] {
        Ok(trimmed.iter().product())
    } else {
        Err(Error::shape(op, format!("cannot broadcast {rhs:?} onto {lhs:?}")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the input gradients produced by `kind`'s backward rule by 1.5.
    /// Exists so gradient checks can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupted = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.is_matrix() {
            Ok((t.shape()[0], t.shape()[1]))
        } else {
            Err(Error::shape(op, format!("expected a matrix, got shape {:?}", t.shape())))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.matrix("matmul", a)?;
        let (q2, r) = self.matrix("matmul", b)?;
        if q != q2 {
            return Err(Error::shape("matmul", format!("[{p}, {q}] x [{q2}, {r}]")));
        }
        let mut out = vec![0.0; p * r];
        gemm(1.0, p, q, r, self.value(a).data(), q, 1, self.value(b).data(), r, 1, &mut out, 0.0);
        Ok(self.push(Tensor::matrix(p, r, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `alpha · A · Bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: f64) -> Result<Var> {
        let (p, q) = self.matrix("matmul_nt", a)?;
        let (r, q2) = self.matrix("matmul_nt", b)?;
        if q != q2 {
            return Err(Error::shape("matmul_nt", format!("[{p}, {q}] x [{r}, {q2}]ᵀ")));
        }
        let mut out = vec![0.0; p * r];
        gemm(alpha, p, q, r, self.value(a).data(), q, 1, self.value(b).data(), 1, q, &mut out, 0.0);
        Ok(self.push(Tensor::matrix(p, r, out)?, Op::MatMulNt(a, b, alpha), &[a, b]))
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bn = broadcast_len(op, ta.shape(), tb.shape())?;
        let bd = tb.data();
        let mut data = Vec::with_capacity(ta.numel());
        if bn == ta.numel() {
            data.extend(ta.data().iter().zip(bd).map(|(&x, &y)| f(x, y)));
        } else {
            for row in ta.data().chunks(bn.max(1)) {
                data.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
        }
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::ScalarMul(a, s), |x| s * x)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `max(x, 0)`; identical to relu but tracked separately in diagnostics.
    pub fn hinge(&mut self, a: Var) -> Var {
        self.unary(a, Op::Hinge(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (p, q) = self.matrix("transpose", a)?;
        let d = self.value(a).data();
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = d[i * q + j];
            }
        }
        Ok(self.push(Tensor::matrix(q, p, out)?, Op::Transpose(a), &[a]))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (p, q) = self.matrix("row_softmax", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(q.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let inv = 1.0 / exp::exp_shifted_sum(row, m);
            row.iter_mut().for_each(|x| *x *= inv);
        }
        Ok(self.push(Tensor::matrix(p, q, out)?, Op::RowSoftmax(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (p, q) = self.matrix("log_softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(q.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| exp::exp_nonpos(x - m)).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push(Tensor::matrix(p, q, out)?, Op::LogSoftmaxRows(a), &[a]))
    }

    /// Column means of a `p×q` matrix as a `1×q` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (p, q) = self.matrix("mean_rows", a)?;
        if p == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; q];
        for row in self.value(a).data().chunks(q.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= p as f64);
        Ok(self.push(Tensor::matrix(1, q, out)?, Op::MeanRows(a), &[a]))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(a), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Euclidean norm of each row of a `p×C` matrix, shape `[p]`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (p, c) = self.matrix("l2_norm_rows", a)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(c.max(1))
            .take(p)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok(self.push(Tensor::new(vec![p], out)?, Op::L2NormRows(a), &[a]))
    }

    /// Each row of a `p×C` matrix divided by `max(‖row‖, 1e-12)`.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (p, c) = self.matrix("normalize_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for r in out.chunks_mut(c.max(1)) {
            let inv = 1.0 / r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            r.iter_mut().for_each(|x| *x *= inv);
        }
        Ok(self.push(Tensor::matrix(p, c, out)?, Op::NormalizeRows(a), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let tail: Vec<usize> = self.value(first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in parts {
            let t = self.value(v);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} does not match trailing {tail:?}", t.shape()),
                ));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[u32]) -> Result<Var> {
        let (p, q) = self.matrix("gather_rows", a)?;
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= p) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of range for {p} rows")));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * q);
        for &i in indices {
            out.extend_from_slice(&d[i as usize * q..(i as usize + 1) * q]);
        }
        Ok(self.push(
            Tensor::matrix(indices.len(), q, out)?,
            Op::GatherRows(a, indices.to_vec()),
            &[a],
        ))
    }

    /// Mean of rows sharing a group id; groups without rows are zero.
    pub fn scatter_mean_rows(&mut self, a: Var, ids: &[u32], groups: usize) -> Result<Var> {
        let (p, q) = self.matrix("scatter_mean_rows", a)?;
        if ids.len() != p {
            return Err(Error::shape("scatter_mean_rows", format!("{} ids for {p} rows", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= groups) {
            return Err(Error::shape("scatter_mean_rows", format!("id {bad} out of range for {groups} groups")));
        }
        let mut counts = vec![0u32; groups];
        let mut out = vec![0.0; groups * q];
        let d = self.value(a).data();
        for (r, &g) in ids.iter().enumerate() {
            counts[g as usize] += 1;
            let dst = &mut out[g as usize * q..(g as usize + 1) * q];
            dst.iter_mut().zip(&d[r * q..(r + 1) * q]).for_each(|(o, x)| *o += x);
        }
        for (g, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = 1.0 / c as f64;
                out[g * q..(g + 1) * q].iter_mut().for_each(|o| *o *= inv);
            }
        }
        Ok(self.push(
            Tensor::matrix(groups, q, out)?,
            Op::ScatterMeanRows(a, ids.to_vec(), counts),
            &[a],
        ))
    }

    /// Distances to the nearest kink for every relu/hinge input element and
    /// every row norm, in node order.
    pub fn kink_margins(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(a) | Op::Hinge(a) => {
                    out.extend(self.nodes[a.0].value.data().iter().map(|x| x.abs()))
                }
                Op::L2NormRows(_) => out.extend_from_slice(n.value.data()),
                Op::NormalizeRows(a) => {
                    let c = n.value.shape()[1].max(1);
                    out.extend(
                        self.nodes[a.0]
                            .value
                            .data()
                            .chunks(c)
                            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()),
                    )
                }
                _ => {}
            }
        }
        out
    }

    /// Back-propagates from scalar `loss`, adding ∂loss/∂leaf into every
    /// gradient-requiring leaf. Gradients accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                    None => self.nodes[i].grad = Some(g),
                }
                continue;
            }
            let scale = if self.corrupted == Some(self.nodes[i].op.kind()) { 1.5 } else { 1.0 };
            self.propagate(i, &g, scale, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], scale: f64, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let n = self.nodes[$v.0].value.numel();
                grads[$v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (p, q, r) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    // dA (p×q) += G (p×r) · Bᵀ
                    gemm(scale, p, r, q, g, r, 1, tb.data(), 1, r, acc!(*a), 1.0);
                }
                if wants(b) {
                    // dB (q×r) += Aᵀ · G
                    gemm(scale, q, p, r, ta.data(), 1, q, g, r, 1, acc!(*b), 1.0);
                }
            }
            Op::MatMulNt(a, b, alpha) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (p, q, r) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                let s = scale * alpha;
                if wants(a) {
                    // dA (p×q) += α·G (p×r) · B
                    gemm(s, p, r, q, g, r, 1, tb.data(), q, 1, acc!(*a), 1.0);
                }
                if wants(b) {
                    // dB (r×q) += α·Gᵀ · A
                    gemm(s, r, p, q, g, 1, r, ta.data(), q, 1, acc!(*b), 1.0);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let bn = tb.numel().max(1);
                let kind = node.op.kind();
                if wants(a) {
                    let da = acc!(*a);
                    for (k, (d, &gk)) in da.iter_mut().zip(g).enumerate() {
                        let local = if kind == OpKind::Mul { tb.data()[k % bn] } else { 1.0 };
                        *d += scale * gk * local;
                    }
                }
                if wants(b) {
                    let db = acc!(*b);
                    for (k, &gk) in g.iter().enumerate() {
                        let local = match kind {
                            OpKind::Add => 1.0,
                            OpKind::Sub => -1.0,
                            _ => ta.data()[k],
                        };
                        db[k % bn] += scale * gk * local;
                    }
                }
            }
            Op::ScalarMul(a, s) => {
                if wants(a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, x)| *d += scale * s * x);
                }
            }
            Op::AddScalar(a) => {
                if wants(a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, x)| *d += scale * x);
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let (p, q) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                    let da = acc!(*a);
                    for r in 0..p {
                        for c in 0..q {
                            da[r * q + c] += scale * g[c * p + r];
                        }
                    }
                }
            }
            Op::RowSoftmax(a) => {
                if wants(a) {
                    let y = node.value.data();
                    let q = node.value.shape()[1].max(1);
                    let da = acc!(*a);
                    for ((dr, yr), gr) in da.chunks_mut(q).zip(y.chunks(q)).zip(g.chunks(q)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for k in 0..q {
                            dr[k] += scale * yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if wants(a) {
                    let y = node.value.data();
                    let q = node.value.shape()[1].max(1);
                    let da = acc!(*a);
                    for ((dr, yr), gr) in da.chunks_mut(q).zip(y.chunks(q)).zip(g.chunks(q)) {
                        let total: f64 = gr.iter().sum();
                        for k in 0..q {
                            dr[k] += scale * (gr[k] - yr[k].exp() * total);
                        }
                    }
                }
            }
            Op::Relu(a) | Op::Hinge(a) => {
                if wants(a) {
                    let x = self.nodes[a.0].value.data();
                    let da = acc!(*a);
                    for k in 0..x.len() {
                        if x[k] > 0.0 {
                            da[k] += scale * g[k];
                        }
                    }
                }
            }
            Op::Square(a) => {
                if wants(a) {
                    let x = self.nodes[a.0].value.data();
                    let da = acc!(*a);
                    for k in 0..x.len() {
                        da[k] += scale * 2.0 * x[k] * g[k];
                    }
                }
            }
            Op::MeanRows(a) => {
                if wants(a) {
                    let p = self.nodes[a.0].value.shape()[0];
                    let q = g.len().max(1);
                    let inv = scale / p as f64;
                    for row in acc!(*a).chunks_mut(q) {
                        row.iter_mut().zip(g).for_each(|(d, x)| *d += inv * x);
                    }
                }
            }
            Op::MeanAll(a) => {
                if wants(a) {
                    let da = acc!(*a);
                    let v = scale * g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::SumAll(a) => {
                if wants(a) {
                    acc!(*a).iter_mut().for_each(|d| *d += scale * g[0]);
                }
            }
            Op::L2NormRows(a) => {
                if wants(a) {
                    let x = self.nodes[a.0].value.data();
                    let c = self.nodes[a.0].value.shape()[1].max(1);
                    let norms = node.value.data();
                    let da = acc!(*a);
                    for (r, (dr, xr)) in da.chunks_mut(c).zip(x.chunks(c)).enumerate() {
                        let f = scale * g[r] / norms[r].max(NORM_EPS);
                        dr.iter_mut().zip(xr).for_each(|(d, x)| *d += f * x);
                    }
                }
            }
            Op::NormalizeRows(a) => {
                if wants(a) {
                    let x = self.nodes[a.0].value.data();
                    let c = node.value.shape()[1].max(1);
                    let y = node.value.data();
                    let da = acc!(*a);
                    for (((dr, xr), yr), gr) in da.chunks_mut(c).zip(x.chunks(c)).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let inv = scale / xr.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for k in 0..c {
                            dr[k] += inv * (gr[k] - yr[k] * dot);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for v in parts {
                    let n = self.nodes[v.0].value.numel();
                    if wants(v) {
                        acc!(*v)
                            .iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, x)| *d += scale * x);
                    }
                    offset += n;
                }
            }
            Op::GatherRows(a, idx) => {
                if wants(a) {
                    let q = self.nodes[a.0].value.shape()[1];
                    let da = acc!(*a);
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut da[i as usize * q..(i as usize + 1) * q];
                        dst.iter_mut().zip(&g[r * q..(r + 1) * q]).for_each(|(d, x)| *d += scale * x);
                    }
                }
            }
            Op::ScatterMeanRows(a, ids, counts) => {
                if wants(a) {
                    let q = self.nodes[a.0].value.shape()[1];
                    let da = acc!(*a);
                    for (r, &gid) in ids.iter().enumerate() {
                        let f = scale / counts[gid as usize] as f64;
                        let src = &g[gid as usize * q..(gid as usize + 1) * q];
                        da[r * q..(r + 1) * q].iter_mut().zip(src).for_each(|(d, x)| *d += f * x);
                    }
                }
            }
        }
    }
}
