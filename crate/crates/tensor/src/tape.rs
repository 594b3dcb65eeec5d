//! Dynamic reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation evaluates
//! eagerly, appends a node holding its value, and records enough to run the
//! vector-Jacobian product later. Parameters are read from a borrowed
//! [`ParamStore`], so many tapes can share one frozen parameter snapshot.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode uses batch statistics in batch norm and records running-stat
/// updates; eval mode reads the running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Full,
    Row(usize),
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Row(d) => i % d,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
    Tanh,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        ba: Bcast,
        bb: Bcast,
    },
    Scale(Var, f64),
    Offset(Var),
    Unary(UnaryKind, Var),
    PRelu {
        x: Var,
        slope: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SparseMatMul {
        m: Arc<CsrMatrix>,
        x: Var,
    },
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Transpose(Var),
    BroadcastRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSoftmaxSegments {
        x: Var,
        offsets: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Running-statistics update emitted by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store
            .get_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .get_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var_unbiased)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Records one forward computation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BatchNormUpdate>,
    flops: u64,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// `c = op(a) · op(b) + beta·c` for row-major buffers, where `op` optionally
/// transposes. `a` is logically `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the buffers hold at least m·k, k·n and m·n elements and the
    // strides above address them in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            mode,
            bn_updates: Vec::new(),
            flops: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add count (2·m·k·n per matmul) accumulated so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Drops every node recorded after `len`. Vars created after that point
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        for slot in &mut self.param_vars {
            if slot.is_some_and(|v| v.0 >= len) {
                *slot = None;
            }
        }
    }

    pub fn take_bn_updates(&mut self) -> Vec<BatchNormUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Inserts a constant (or, with `requires_grad`, a differentiable input).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// The tape node for a stored parameter; created once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let src = self.params.get(id);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().to_vec());
        let v = self.push(value, Op::Param, src.requires_grad);
        self.param_vars[id.index()] = Some(v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        self.flops += 2 * (m * k * n) as u64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// Product of a constant sparse matrix with `x` (rank 2).
    pub fn sparse_matmul(&mut self, m: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != m.cols() {
            return Err(shape_err("sparse_matmul", &[&[m.rows(), m.cols()], sx]));
        }
        let w = sx[1];
        let out = m.mul_dense(self.value(x).data(), w);
        self.flops += 2 * (m.nnz() * w) as u64;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![m.rows(), w], out),
            Op::SparseMatMul { m: Arc::clone(m), x },
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", &[s]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), ng))
    }

    // ---- elementwise binary with broadcasting ---------------------------

    fn classify(out: &[usize], s: &[usize]) -> Option<Bcast> {
        let numel: usize = s.iter().product();
        if s == out {
            return Some(Bcast::Full);
        }
        if numel == 1 {
            return Some(Bcast::Scalar);
        }
        let d = *out.last()?;
        let row_like = (s.len() == 1 && s[0] == d) || (s.len() == 2 && s[0] == 1 && s[1] == d);
        (out.len() == 2 && row_like).then_some(Bcast::Row(d))
    }

    fn binary(&mut self, kind: BinKind, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        let out_shape = if na >= nb { sa.clone() } else { sb.clone() };
        let (Some(ba), Some(bb)) = (Self::classify(&out_shape, &sa), Self::classify(&out_shape, &sb)) else {
            return Err(shape_err(op, &[&sa, &sb]));
        };
        let n: usize = out_shape.iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n);
        match (kind, ba, bb) {
            (BinKind::Add, Bcast::Full, Bcast::Full) => {
                out.extend(va.iter().zip(vb).map(|(x, y)| x + y));
            }
            (BinKind::Mul, Bcast::Full, Bcast::Full) => {
                out.extend(va.iter().zip(vb).map(|(x, y)| x * y));
            }
            _ => {
                for i in 0..n {
                    let (x, y) = (va[ba.index(i)], vb[bb.index(i)]);
                    out.push(match kind {
                        BinKind::Add => x + y,
                        BinKind::Sub => x - y,
                        BinKind::Mul => x * y,
                        BinKind::Div => x / y,
                    });
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Binary { kind, a, b, ba, bb },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, "div", a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v + c).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::Offset(x), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    // ---- activations and pointwise functions ----------------------------

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let t = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Softplus => softplus,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Square => |v| v * v,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Tanh => f64::tanh,
        };
        let out: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::Unary(kind, x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    /// Parametric ReLU with a single learned slope (a one-element tensor).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).numel() != 1 {
            return Err(shape_err("prelu", &[self.shape(x), self.shape(slope)]));
        }
        let a = self.value(slope).item();
        let t = self.value(x);
        let out: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { a * v })
            .collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(x) || self.ng(slope);
        Ok(self.push(Tensor::from_parts(shape, out), Op::PRelu { x, slope }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if c == 0 || t.rank() == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SoftmaxRows(x), ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if c == 0 || t.rank() == 0 {
            return Err(TensorError::EmptyAxis { op: "log_softmax" });
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmaxRows(x), ng))
    }

    /// Log-softmax over consecutive segments of a flat score vector.
    /// `offsets` has one more entry than there are segments.
    pub fn log_softmax_segments(&mut self, x: Var, offsets: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if offsets.first() != Some(&0) || offsets.last() != Some(&t.numel()) {
            return Err(shape_err("log_softmax_segments", &[t.shape(), &[offsets.len()]]));
        }
        let mut out = t.data().to_vec();
        for w in offsets.windows(2) {
            if w[1] <= w[0] {
                return Err(TensorError::EmptyAxis {
                    op: "log_softmax_segments",
                });
            }
            let seg = &mut out[w[0]..w[1]];
            let lse = logsumexp(seg);
            seg.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmaxSegments { x, offsets },
            ng,
        ))
    }

    /// Batch normalisation over rows (nodes), per column (channel).
    ///
    /// Train mode normalises with the biased batch variance and queues a
    /// running-statistics update; eval mode uses the stored running values.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.value(gamma).numel() != s[1] || self.value(beta).numel() != s[1] {
            return Err(shape_err(
                "batch_norm",
                &[&s, self.shape(gamma), self.shape(beta)],
            ));
        }
        let (n, d) = (s[0], s[1]);
        let xv = self.value(x).data();
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            if n == 0 {
                return Err(TensorError::EmptyAxis { op: "batch_norm" });
            }
            let mut mean = vec![0.0; d];
            for row in xv.chunks(d) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; d];
            for row in xv.chunks(d) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            (mean, var)
        } else {
            (
                self.params.get(running_mean).data().to_vec(),
                self.params.get(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xv[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        if train {
            let unbiased = if n > 1 {
                var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
            } else {
                var.clone()
            };
            self.bn_updates.push(BatchNormUpdate {
                running_mean,
                running_var,
                batch_mean: mean,
                batch_var_unbiased: unbiased,
                momentum,
            });
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        ))
    }

    // ---- structural ops -------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(shape_err("concat", &[]));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        if shapes.iter().any(|s| s.len() != 2) {
            let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            return Err(shape_err("concat", &refs));
        }
        let other = 1 - axis;
        if shapes.iter().any(|s| s[other] != shapes[0][other]) {
            let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            return Err(shape_err("concat", &refs));
        }
        let (out_shape, out) = if axis == 0 {
            let rows: usize = shapes.iter().map(|s| s[0]).sum();
            let mut out = Vec::with_capacity(rows * shapes[0][1]);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            (vec![rows, shapes[0][1]], out)
        } else {
            let rows = shapes[0][0];
            let cols: usize = shapes.iter().map(|s| s[1]).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (&p, s) in parts.iter().zip(&shapes) {
                    let w = s[1];
                    out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
                }
            }
            (vec![rows, cols], out)
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..end` of a matrix.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || axis > 1 || start > end || end > s[axis] {
            return Err(shape_err("slice", &[&s, &[axis, start, end]]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let (shape, out) = if axis == 0 {
            (vec![end - start, c], src[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&src[i * c + start..i * c + end]);
            }
            (vec![r, w], out)
        };
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("gather_rows", &[&s]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(shape_err("reshape", &[t.shape(), &shape]));
        }
        let out = t.data().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Reshape(x), ng))
    }

    /// Repeats a row vector (`[d]` or `[1,d]`) `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.numel();
        let row_like = t.rank() == 1 || (t.rank() == 2 && t.shape()[0] == 1);
        if !row_like {
            return Err(shape_err("broadcast", &[t.shape(), &[n]]));
        }
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::BroadcastRows(x), ng))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "reduce_mean" });
        }
        let s = self.sum(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum over rows (`axis = 0`, giving `[1,c]`) or columns (`axis = 1`,
    /// giving `[r,1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(shape_err("reduce_sum", &[&s]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let (shape, out) = if axis == 0 {
            let mut out = vec![0.0; c];
            for row in src.chunks(c.max(1)).take(r) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            (vec![1, c], out)
        } else {
            let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
            (vec![r, 1], out)
        };
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(x, axis), ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(shape_err("reduce_mean", &[&s]));
        }
        if s[axis] == 0 {
            return Err(TensorError::EmptyAxis { op: "reduce_mean" });
        }
        let total = self.sum_axis(x, axis)?;
        Ok(self.scale(total, 1.0 / s[axis] as f64))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let mut params = ParamGrads::empty(self.params.len());
        for (pid, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if v.0 < grads.len() {
                    params.0[pid] = grads[v.0].take();
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv, true, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, av, true, g, false, 1.0, gb);
                }
            }
            Op::Binary { kind, a, b, ba, bb } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if matches!((ba, bb), (Bcast::Full, Bcast::Full)) {
                    if let Some(ga) = self.acc(grads, *a) {
                        match kind {
                            BinKind::Add | BinKind::Sub => ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi),
                            BinKind::Mul => ga.iter_mut().zip(g).zip(bv).for_each(|((s, gi), y)| *s += gi * y),
                            BinKind::Div => ga.iter_mut().zip(g).zip(bv).for_each(|((s, gi), y)| *s += gi / y),
                        }
                    }
                    if let Some(gb) = self.acc(grads, *b) {
                        match kind {
                            BinKind::Add => gb.iter_mut().zip(g).for_each(|(s, gi)| *s += gi),
                            BinKind::Sub => gb.iter_mut().zip(g).for_each(|(s, gi)| *s -= gi),
                            BinKind::Mul => gb.iter_mut().zip(g).zip(av).for_each(|((s, gi), x)| *s += gi * x),
                            BinKind::Div => {
                                for j in 0..g.len() {
                                    gb[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                                }
                            }
                        }
                    }
                    return;
                }
                if let Some(ga) = self.acc(grads, *a) {
                    for (idx, gi) in g.iter().enumerate() {
                        let yv = bv[bb.index(idx)];
                        ga[ba.index(idx)] += match kind {
                            BinKind::Add | BinKind::Sub => *gi,
                            BinKind::Mul => gi * yv,
                            BinKind::Div => gi / yv,
                        };
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (idx, gi) in g.iter().enumerate() {
                        let (x, yv) = (av[ba.index(idx)], bv[bb.index(idx)]);
                        gb[bb.index(idx)] += match kind {
                            BinKind::Add => *gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * x,
                            BinKind::Div => -gi * x / (yv * yv),
                        };
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xv[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => y[j] * (1.0 - y[j]),
                            UnaryKind::Softplus => sigmoid(xv[j]),
                            UnaryKind::Exp => y[j],
                            UnaryKind::Log => 1.0 / xv[j],
                            UnaryKind::Square => 2.0 * xv[j],
                            UnaryKind::Sqrt => 0.5 / y[j],
                            UnaryKind::Tanh => 1.0 - y[j] * y[j],
                        };
                        gx[j] += g[j] * d;
                    }
                }
            }
            Op::PRelu { x, slope } => {
                let xv = self.value(*x).data();
                let a = self.value(*slope).item();
                if let Some(gx) = self.acc(grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += if xv[j] > 0.0 { g[j] } else { a * g[j] };
                    }
                }
                if let Some(gs) = self.acc(grads, *slope) {
                    gs[0] += xv
                        .iter()
                        .zip(g)
                        .filter(|(v, _)| **v <= 0.0)
                        .map(|(v, gi)| v * gi)
                        .sum::<f64>();
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                let total_cols = node.value.cols();
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2();
                    if let Some(gp) = self.acc(grads, p) {
                        if *axis == 0 {
                            let span = &g[offset * pc..(offset + pr) * pc];
                            gp.iter_mut().zip(span).for_each(|(a, b)| *a += b);
                        } else {
                            for r in 0..pr {
                                let src = &g[r * total_cols + offset..r * total_cols + offset + pc];
                                gp[r * pc..(r + 1) * pc]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { x, axis, start } => {
                let (r, c) = self.value(*x).dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    if *axis == 0 {
                        gx[start * c..start * c + g.len()]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(a, b)| *a += b);
                    } else {
                        let w = node.value.cols();
                        for i in 0..r {
                            gx[i * c + start..i * c + start + w]
                                .iter_mut()
                                .zip(&g[i * w..(i + 1) * w])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &src) in idx.iter().enumerate() {
                        gx[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SparseMatMul { m, x } => {
                let w = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    m.mul_transpose_acc(g, w, gx);
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::SumAxis(x, axis) => {
                let (r, c) = self.value(*x).dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += if *axis == 0 { g[j] } else { g[i] };
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::BroadcastRows(x) => {
                let d = self.value(*x).numel();
                if let Some(gx) = self.acc(grads, *x) {
                    for row in g.chunks(d.max(1)) {
                        gx.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), dst) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), dst) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            dst[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LogSoftmaxSegments { x, offsets } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for w in offsets.windows(2) {
                        let total: f64 = g[w[0]..w[1]].iter().sum();
                        for j in w[0]..w[1] {
                            gx[j] += g[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, d) = node.value.dims2();
                let gv = self.value(*gamma).data().to_vec();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    if *train {
                        let mut sum_g = vec![0.0; d];
                        let mut sum_gx = vec![0.0; d];
                        for i in 0..n {
                            for j in 0..d {
                                let dh = g[i * d + j] * gv[j];
                                sum_g[j] += dh;
                                sum_gx[j] += dh * xhat[i * d + j];
                            }
                        }
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..d {
                                let dh = g[i * d + j] * gv[j];
                                gx[i * d + j] += inv_std[j] / nf
                                    * (nf * dh - sum_g[j] - xhat[i * d + j] * sum_gx[j]);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..d {
                                gx[i * d + j] += g[i * d + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to a differentiable leaf created with
    /// [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}
