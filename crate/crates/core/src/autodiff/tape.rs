//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Values are dense row-major matrices. A [`Tape`] records every
//! operation eagerly during the forward pass; [`Tape::backward`] replays
//! the recording in reverse, accumulating adjoints. The tape is rebuilt
//! for every training step (define-by-run).
//!
//! Tape arithmetic runs in f64; parameters and checkpoints remain f32
//! (see `params`), so model state stays compact and bit-exact on disk
//! while analytic gradients hold up against central differences at
//! tight tolerances.

use std::fmt;

/// Handle to a value on the tape. Cheap to copy; the shape is cached so
/// graph-building code can reason about dimensions without a tape lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug)]
pub enum GradError {
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    BadShape {
        op: &'static str,
        detail: String,
    },
    NonFinite {
        op: &'static str,
    },
    NonFiniteGrad {
        op: &'static str,
    },
    NotScalar {
        rows: usize,
        cols: usize,
    },
    /// Two evaluations of a supposedly pure function disagreed.
    NonDeterministic,
}

impl fmt::Display for GradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradError::ShapeMismatch { op, lhs, rhs } => write!(
                f,
                "shape mismatch in {op}: {}x{} vs {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            GradError::BadShape { op, detail } => write!(f, "bad shape in {op}: {detail}"),
            GradError::NonFinite { op } => write!(f, "non-finite output of {op}"),
            GradError::NonFiniteGrad { op } => write!(f, "non-finite gradient at {op}"),
            GradError::NotScalar { rows, cols } => {
                write!(f, "backward requires a 1x1 loss, got {rows}x{cols}")
            }
            GradError::NonDeterministic => write!(f, "function is not deterministic"),
        }
    }
}

impl std::error::Error for GradError {}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Concat(Vec<usize>),
    SliceCols { input: usize, start: usize },
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    Huber { input: usize, delta: f64 },
    // Forward is eager, so only the slope is needed for backward.
    Affine { input: usize, mul: f64 },
    Softmax(usize),
    LogSoftmax(usize),
    RowLogSumExp(usize),
    Sum(usize),
    RowSum(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Concat(..) => "concat",
            Op::SliceCols { .. } => "slice",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Huber { .. } => "huber",
            Op::Affine { .. } => "affine",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::RowLogSumExp(..) => "row_logsumexp",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
        }
    }
}

struct Node {
    op: Op,
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    /// Persistent gradient buffer; allocated for requires-grad leaves only.
    grad: Option<Vec<f64>>,
}

/// Define-by-run recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

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

    /// Forward values of a node.
    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].values
    }

    /// Convenience accessor for 1x1 nodes.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert!(v.is_scalar());
        self.nodes[v.id].values[0]
    }

    /// Accumulated gradient of a requires-grad leaf, if backward has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.id].grad.as_deref()
    }

    /// Reset the persistent gradients of all leaves to zero.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(
        &mut self,
        op: Op,
        values: Vec<f64>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
    ) -> Result<Var, GradError> {
        debug_assert_eq!(values.len(), rows * cols);
        if !values.iter().all(|x| x.is_finite()) {
            return Err(GradError::NonFinite { op: op.name() });
        }
        let grad = match op {
            Op::Leaf if requires_grad => Some(vec![0.0; values.len()]),
            _ => None,
        };
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            values,
            rows,
            cols,
            requires_grad,
            grad,
        });
        Ok(Var { id, rows, cols })
    }

    /// Insert a leaf that participates in differentiation.
    pub fn leaf(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<Var, GradError> {
        if values.len() != rows * cols {
            return Err(GradError::BadShape {
                op: "leaf",
                detail: format!("{} values for {}x{}", values.len(), rows, cols),
            });
        }
        self.push(Op::Leaf, values, rows, cols, true)
    }

    /// Insert a constant (no gradient is tracked through it).
    pub fn constant(
        &mut self,
        values: Vec<f64>,
        rows: usize,
        cols: usize,
    ) -> Result<Var, GradError> {
        if values.len() != rows * cols {
            return Err(GradError::BadShape {
                op: "constant",
                detail: format!("{} values for {}x{}", values.len(), rows, cols),
            });
        }
        self.push(Op::Leaf, values, rows, cols, false)
    }

    /// Constant from f32 storage (feature buffers, parameter values).
    pub fn constant_from_f32(
        &mut self,
        values: &[f32],
        rows: usize,
        cols: usize,
    ) -> Result<Var, GradError> {
        self.constant(values.iter().map(|&v| v as f64).collect(), rows, cols)
    }

    /// Leaf from f32 storage.
    pub fn leaf_from_f32(
        &mut self,
        values: &[f32],
        rows: usize,
        cols: usize,
    ) -> Result<Var, GradError> {
        self.leaf(values.iter().map(|&v| v as f64).collect(), rows, cols)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<Var, GradError> {
        self.constant(vec![0.0; rows * cols], rows, cols)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var, GradError> {
        self.constant(vec![value], 1, 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        if a.cols != b.rows {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: (a.rows, a.cols),
                rhs: (b.rows, b.cols),
            });
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0f64; m * n];
        {
            let av = &self.nodes[a.id].values;
            let bv = &self.nodes[b.id].values;
            matmul_kernel(av, bv, &mut out, m, k, n);
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::MatMul(a.id, b.id), out, m, n, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::Add(a.id, b.id), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::Sub(a.id, b.id), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::Mul(a.id, b.id), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::Div(a.id, b.id), |x, y| x / y)
    }

    /// Elementwise binary with optional row-broadcast: `b` may be `1 x C`
    /// against an `R x C` lhs.
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, GradError> {
        let broadcast = b.rows == 1 && a.cols == b.cols && a.rows >= 1;
        if !(a.rows == b.rows && a.cols == b.cols) && !broadcast {
            return Err(GradError::ShapeMismatch {
                op: op.name(),
                lhs: (a.rows, a.cols),
                rhs: (b.rows, b.cols),
            });
        }
        let av = &self.nodes[a.id].values;
        let bv = &self.nodes[b.id].values;
        let mut out = vec![0.0f64; a.len()];
        if a.rows == b.rows {
            for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                *o = f(x, y);
            }
        } else {
            for r in 0..a.rows {
                let row = &av[r * a.cols..(r + 1) * a.cols];
                let dst = &mut out[r * a.cols..(r + 1) * a.cols];
                for ((o, &x), &y) in dst.iter_mut().zip(row).zip(bv) {
                    *o = f(x, y);
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(op, out, a.rows, a.cols, rg)
    }

    /// Concatenate along columns; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let first = parts.first().ok_or(GradError::BadShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let rows = first.rows;
        let mut cols = 0;
        for p in parts {
            if p.rows != rows {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: (rows, first.cols),
                    rhs: (p.rows, p.cols),
                });
            }
            cols += p.cols;
        }
        let mut out = vec![0.0f64; rows * cols];
        let mut offset = 0;
        for p in parts {
            let pv = &self.nodes[p.id].values;
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + p.cols]
                    .copy_from_slice(&pv[r * p.cols..(r + 1) * p.cols]);
            }
            offset += p.cols;
        }
        let rg = parts.iter().any(|p| self.requires(*p));
        self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), out, rows, cols, rg)
    }

    /// Column range `[start, end)` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, GradError> {
        if start >= end || end > a.cols {
            return Err(GradError::BadShape {
                op: "slice",
                detail: format!("range {start}..{end} of {} cols", a.cols),
            });
        }
        let cols = end - start;
        let av = &self.nodes[a.id].values;
        let mut out = vec![0.0f64; a.rows * cols];
        for r in 0..a.rows {
            out[r * cols..(r + 1) * cols]
                .copy_from_slice(&av[r * a.cols + start..r * a.cols + end]);
        }
        let rg = self.requires(a);
        self.push(Op::SliceCols { input: a.id, start }, out, a.rows, cols, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Tanh(a.id), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Sigmoid(a.id), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Exp(a.id), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Log(a.id), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Sqrt(a.id), |x| x.sqrt())
    }

    /// max(0, x); the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Relu(a.id), |x| x.max(0.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, GradError> {
        self.unary(a, Op::Clamp { input: a.id, lo, hi }, move |x| x.clamp(lo, hi))
    }

    /// Elementwise Huber: quadratic inside `delta`, linear outside.
    pub fn huber(&mut self, a: Var, delta: f64) -> Result<Var, GradError> {
        self.unary(a, Op::Huber { input: a.id, delta }, move |x| {
            let ax = x.abs();
            if ax <= delta {
                0.5 * x * x
            } else {
                delta * (ax - 0.5 * delta)
            }
        })
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var, GradError> {
        self.unary(a, Op::Affine { input: a.id, mul }, move |x| mul * x + add)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, GradError> {
        let out: Vec<f64> = self.nodes[a.id].values.iter().map(|&x| f(x)).collect();
        let rg = self.requires(a);
        self.push(op, out, a.rows, a.cols, rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, GradError> {
        let av = &self.nodes[a.id].values;
        let mut out = vec![0.0f64; a.len()];
        for r in 0..a.rows {
            let row = &av[r * a.cols..(r + 1) * a.cols];
            let dst = &mut out[r * a.cols..(r + 1) * a.cols];
            softmax_row(row, dst);
        }
        let rg = self.requires(a);
        self.push(Op::Softmax(a.id), out, a.rows, a.cols, rg)
    }

    /// Row-wise log-softmax, stable for widely spread logits.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, GradError> {
        let av = &self.nodes[a.id].values;
        let mut out = vec![0.0f64; a.len()];
        for r in 0..a.rows {
            let row = &av[r * a.cols..(r + 1) * a.cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse: f64 = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for (o, &x) in out[r * a.cols..(r + 1) * a.cols].iter_mut().zip(row) {
                *o = x - m - lse;
            }
        }
        let rg = self.requires(a);
        self.push(Op::LogSoftmax(a.id), out, a.rows, a.cols, rg)
    }

    /// Row-wise log-sum-exp, `R x C -> R x 1`.
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var, GradError> {
        let av = &self.nodes[a.id].values;
        let mut out = vec![0.0f64; a.rows];
        for r in 0..a.rows {
            let row = &av[r * a.cols..(r + 1) * a.cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            out[r] = m + s.ln();
        }
        let rg = self.requires(a);
        self.push(Op::RowLogSumExp(a.id), out, a.rows, 1, rg)
    }

    /// Sum of all entries, `R x C -> 1 x 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let s: f64 = self.nodes[a.id].values.iter().sum();
        let rg = self.requires(a);
        self.push(Op::Sum(a.id), vec![s], 1, 1, rg)
    }

    /// Per-row sum, `R x C -> R x 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, GradError> {
        let av = &self.nodes[a.id].values;
        let mut out = vec![0.0f64; a.rows];
        for r in 0..a.rows {
            out[r] = av[r * a.cols..(r + 1) * a.cols].iter().sum();
        }
        let rg = self.requires(a);
        self.push(Op::RowSum(a.id), out, a.rows, 1, rg)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Reverse-topological adjoint accumulation from a scalar loss.
    ///
    /// Adjoints of intermediates live in a scratch buffer; persistent
    /// leaf gradients are accumulated (`+=`), so a second backward
    /// without a reset doubles them exactly.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        if !loss.is_scalar() {
            return Err(GradError::NotScalar {
                rows: loss.rows,
                cols: loss.cols,
            });
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        scratch[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let g = match scratch[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(GradError::NonFiniteGrad {
                    op: self.nodes[id].op.name(),
                });
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {
                    if let Some(buf) = self.nodes[id].grad.as_mut() {
                        for (b, &x) in buf.iter_mut().zip(&g) {
                            *b += x;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k, n) = (
                        self.nodes[a].rows,
                        self.nodes[a].cols,
                        self.nodes[b].cols,
                    );
                    if self.nodes[a].requires_grad {
                        // dA = dC * B^T, via an explicit transpose so the
                        // kernel stays in its streaming axpy form.
                        let bv = &self.nodes[b].values;
                        let mut bt = vec![0.0f64; n * k];
                        for kk in 0..k {
                            for j in 0..n {
                                bt[j * k + kk] = bv[kk * n + j];
                            }
                        }
                        let mut da = vec![0.0f64; m * k];
                        matmul_kernel(&g, &bt, &mut da, m, n, k);
                        accumulate(&mut scratch, a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        // dB = A^T * dC
                        let av = &self.nodes[a].values;
                        let mut db = vec![0.0f64; k * n];
                        for i in 0..m {
                            let arow = &av[i * k..(i + 1) * k];
                            let grow = &g[i * n..(i + 1) * n];
                            for (kk, &avv) in arow.iter().enumerate() {
                                let dst = &mut db[kk * n..(kk + 1) * n];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += avv * gv;
                                }
                            }
                        }
                        accumulate(&mut scratch, b, &db);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a].requires_grad {
                        accumulate(&mut scratch, a, &g);
                    }
                    if self.nodes[b].requires_grad {
                        self.accumulate_maybe_broadcast(&mut scratch, b, id, &g, |gv| gv);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a].requires_grad {
                        accumulate(&mut scratch, a, &g);
                    }
                    if self.nodes[b].requires_grad {
                        self.accumulate_maybe_broadcast(&mut scratch, b, id, &g, |gv| -gv);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a].requires_grad {
                        let da = self.broadcast_zip(id, b, &g, |y, gv| gv * y);
                        accumulate(&mut scratch, a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        self.accumulate_mul_rhs(&mut scratch, a, b, id, &g);
                    }
                }
                Op::Div(a, b) => {
                    if self.nodes[a].requires_grad {
                        let da = self.broadcast_zip(id, b, &g, |y, gv| gv / y);
                        accumulate(&mut scratch, a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        self.accumulate_div_rhs(&mut scratch, a, b, id, &g);
                    }
                }
                Op::Concat(parts) => {
                    let cols = self.nodes[id].cols;
                    let rows = self.nodes[id].rows;
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.nodes[p].cols;
                        if self.nodes[p].requires_grad {
                            let mut dp = vec![0.0f64; rows * pc];
                            for r in 0..rows {
                                dp[r * pc..(r + 1) * pc].copy_from_slice(
                                    &g[r * cols + offset..r * cols + offset + pc],
                                );
                            }
                            accumulate(&mut scratch, p, &dp);
                        }
                        offset += pc;
                    }
                }
                Op::SliceCols { input, start } => {
                    let rows = self.nodes[id].rows;
                    let cols = self.nodes[id].cols;
                    let in_cols = self.nodes[input].cols;
                    let mut di = vec![0.0f64; rows * in_cols];
                    for r in 0..rows {
                        di[r * in_cols + start..r * in_cols + start + cols]
                            .copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                    accumulate(&mut scratch, input, &di);
                }
                Op::Tanh(a) => {
                    let di: Vec<f64> = self.nodes[id]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * (1.0 - y * y))
                        .collect();
                    accumulate(&mut scratch, a, &di);
                }
                Op::Sigmoid(a) => {
                    let di: Vec<f64> = self.nodes[id]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut scratch, a, &di);
                }
                Op::Exp(a) => {
                    let di: Vec<f64> = self.nodes[id]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * y)
                        .collect();
                    accumulate(&mut scratch, a, &di);
                }
                Op::Log(a) => {
                    let di: Vec<f64> = self.nodes[a]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| gv / x)
                        .collect();
                    accumulate(&mut scratch, a, &di);
                }
                Op::Sqrt(a) => {
                    let di: Vec<f64> = self.nodes[id]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * 0.5 / y)
                        .collect();
                    accumulate(&mut scratch, a, &di);
                }
                Op::Relu(a) => {
                    let di: Vec<f64> = self.nodes[a]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut scratch, a, &di);
                }
                Op::Clamp { input, lo, hi } => {
                    let di: Vec<f64> = self.nodes[input]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| if x > lo && x < hi { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut scratch, input, &di);
                }
                Op::Huber { input, delta } => {
                    let di: Vec<f64> = self.nodes[input]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| gv * x.clamp(-delta, delta))
                        .collect();
                    accumulate(&mut scratch, input, &di);
                }
                Op::Affine { input, mul } => {
                    let di: Vec<f64> = g.iter().map(|&gv| gv * mul).collect();
                    accumulate(&mut scratch, input, &di);
                }
                Op::Softmax(a) => {
                    let rows = self.nodes[id].rows;
                    let cols = self.nodes[id].cols;
                    let mut di = vec![0.0f64; rows * cols];
                    for r in 0..rows {
                        let y = &self.nodes[id].values[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for ((d, &yv), &gv) in
                            di[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gr)
                        {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut scratch, a, &di);
                }
                Op::LogSoftmax(a) => {
                    let rows = self.nodes[id].rows;
                    let cols = self.nodes[id].cols;
                    let mut di = vec![0.0f64; rows * cols];
                    for r in 0..rows {
                        let y = &self.nodes[id].values[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for ((d, &yv), &gv) in
                            di[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gr)
                        {
                            *d = gv - yv.exp() * gsum;
                        }
                    }
                    accumulate(&mut scratch, a, &di);
                }
                Op::RowLogSumExp(a) => {
                    let rows = self.nodes[a].rows;
                    let cols = self.nodes[a].cols;
                    let av = &self.nodes[a].values;
                    let mut di = vec![0.0f64; rows * cols];
                    for r in 0..rows {
                        let row = &av[r * cols..(r + 1) * cols];
                        let mut sm = vec![0.0f64; cols];
                        softmax_row(row, &mut sm);
                        for (d, &s) in di[r * cols..(r + 1) * cols].iter_mut().zip(&sm) {
                            *d = g[r] * s;
                        }
                    }
                    accumulate(&mut scratch, a, &di);
                }
                Op::Sum(a) => {
                    let di = vec![g[0]; self.nodes[a].values.len()];
                    accumulate(&mut scratch, a, &di);
                }
                Op::RowSum(a) => {
                    let rows = self.nodes[a].rows;
                    let cols = self.nodes[a].cols;
                    let mut di = vec![0.0f64; rows * cols];
                    for r in 0..rows {
                        di[r * cols..(r + 1) * cols].iter_mut().for_each(|d| *d = g[r]);
                    }
                    accumulate(&mut scratch, a, &di);
                }
            }
        }
        Ok(())
    }

    /// Zip g with the rhs values, honoring row broadcast of the rhs.
    fn broadcast_zip(
        &self,
        out_id: usize,
        b: usize,
        g: &[f64],
        f: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        let rows = self.nodes[out_id].rows;
        let cols = self.nodes[out_id].cols;
        let bv = &self.nodes[b].values;
        let mut out = vec![0.0f64; rows * cols];
        if self.nodes[b].rows == rows {
            for ((o, &gv), &y) in out.iter_mut().zip(g).zip(bv) {
                *o = f(y, gv);
            }
        } else {
            for (orow, grow) in out.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                for ((o, &gv), &y) in orow.iter_mut().zip(grow).zip(bv) {
                    *o = f(y, gv);
                }
            }
        }
        out
    }

    /// Accumulate into `b` for add/sub where `b` may be row-broadcast.
    fn accumulate_maybe_broadcast(
        &self,
        scratch: &mut Vec<Option<Vec<f64>>>,
        b: usize,
        out_id: usize,
        g: &[f64],
        f: impl Fn(f64) -> f64,
    ) {
        let rows = self.nodes[out_id].rows;
        let cols = self.nodes[out_id].cols;
        if self.nodes[b].rows == rows {
            let db: Vec<f64> = g.iter().map(|&gv| f(gv)).collect();
            accumulate(scratch, b, &db);
        } else {
            let mut db = vec![0.0f64; cols];
            for grow in g.chunks_exact(cols) {
                for (d, &gv) in db.iter_mut().zip(grow) {
                    *d += f(gv);
                }
            }
            accumulate(scratch, b, &db);
        }
    }

    fn accumulate_mul_rhs(
        &self,
        scratch: &mut Vec<Option<Vec<f64>>>,
        a: usize,
        b: usize,
        out_id: usize,
        g: &[f64],
    ) {
        let rows = self.nodes[out_id].rows;
        let cols = self.nodes[out_id].cols;
        let av = &self.nodes[a].values;
        if self.nodes[b].rows == rows {
            let db: Vec<f64> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
            accumulate(scratch, b, &db);
        } else {
            let mut db = vec![0.0f64; cols];
            for (grow, arow) in g.chunks_exact(cols).zip(av.chunks_exact(cols)) {
                for ((d, &gv), &x) in db.iter_mut().zip(grow).zip(arow) {
                    *d += gv * x;
                }
            }
            accumulate(scratch, b, &db);
        }
    }

    fn accumulate_div_rhs(
        &self,
        scratch: &mut Vec<Option<Vec<f64>>>,
        a: usize,
        b: usize,
        out_id: usize,
        g: &[f64],
    ) {
        let rows = self.nodes[out_id].rows;
        let cols = self.nodes[out_id].cols;
        let av = &self.nodes[a].values;
        let bv = &self.nodes[b].values;
        if self.nodes[b].rows == rows {
            let db: Vec<f64> = g
                .iter()
                .zip(av)
                .zip(bv)
                .map(|((&gv, &x), &y)| -gv * x / (y * y))
                .collect();
            accumulate(scratch, b, &db);
        } else {
            let mut db = vec![0.0f64; cols];
            for (grow, arow) in g.chunks_exact(cols).zip(av.chunks_exact(cols)) {
                for (((d, &gv), &x), &y) in db.iter_mut().zip(grow).zip(arow).zip(bv) {
                    *d += -gv * x / (y * y);
                }
            }
            accumulate(scratch, b, &db);
        }
    }
}

fn accumulate(scratch: &mut Vec<Option<Vec<f64>>>, id: usize, contribution: &[f64]) {
    let slot = scratch[id].get_or_insert_with(|| vec![0.0; contribution.len()]);
    for (s, &c) in slot.iter_mut().zip(contribution) {
        *s += c;
    }
}

fn softmax_row(row: &[f64], dst: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
    let mut sum = 0.0f64;
    for (d, &x) in dst.iter_mut().zip(row) {
        let e = (x - m).exp();
        *d = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    dst.iter_mut().for_each(|d| *d *= inv);
}

fn matmul_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_rows_select_entries() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2, 3).unwrap();
        let b = t.constant(vec![1.0, 2.0, 3.0], 3, 1).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut t = Tape::new();
        let a = t.zeros(2, 3).unwrap();
        let y = t.tanh(a).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_over_equal_logits() {
        let mut t = Tape::new();
        let a = t.zeros(1, 4).unwrap();
        let y = t.softmax(a).unwrap();
        for &v in t.value(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.zeros(2, 3).unwrap();
        let b = t.zeros(2, 3).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, -2.0, 3.0, 0.5], 2, 2).unwrap();
        let s = t.sum(w).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn chain_rule_through_square() {
        // loss = (w*x)^2 at w=3, x=2 -> d/dw = 2*(wx)*x = 24
        let mut t = Tape::new();
        let w = t.leaf(vec![3.0], 1, 1).unwrap();
        let x = t.constant(vec![2.0], 1, 1).unwrap();
        let wx = t.mul(w, x).unwrap();
        let sq = t.mul(wx, wx).unwrap();
        t.backward(sq).unwrap();
        assert!((t.grad(w).unwrap()[0] - 24.0).abs() < 1e-9);
    }

    #[test]
    fn backward_twice_accumulates_exactly_double() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0], 1, 2).unwrap();
        let y = t.mul(w, w).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        let first: Vec<f64> = t.grad(w).unwrap().to_vec();
        t.backward(s).unwrap();
        let second: Vec<f64> = t.grad(w).unwrap().to_vec();
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(*b, 2.0 * *a);
        }
        t.zero_grads();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), first.as_slice());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0], 1, 2).unwrap();
        let y = t.mul(w, w).unwrap();
        assert!(matches!(t.backward(y), Err(GradError::NotScalar { .. })));
    }

    #[test]
    fn off_path_parameters_get_zero_grad() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0], 1, 1).unwrap();
        let unused = t.leaf(vec![5.0], 1, 1).unwrap();
        let s = t.sum(w).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(vec![1000.0], 1, 1).unwrap();
        let err = t.exp(a).unwrap_err();
        assert!(matches!(err, GradError::NonFinite { op: "exp" }));
    }

    #[test]
    fn row_broadcast_add_sums_bias_grad_over_rows() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        let b = t.leaf(vec![0.5, -0.5], 1, 2).unwrap();
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y), &[1.5, 1.5, 3.5, 3.5]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn slice_and_concat_round_trip_gradients() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3).unwrap();
        let left = t.slice_cols(w, 0, 1).unwrap();
        let right = t.slice_cols(w, 1, 3).unwrap();
        let back = t.concat_cols(&[left, right]).unwrap();
        assert_eq!(t.value(back), t.value(w));
        let doubled = t.affine(back, 2.0, 0.0).unwrap();
        let s = t.sum(doubled).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(w).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn huber_forward_branches() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.3, 3.0], 1, 2).unwrap();
        let y = t.huber(x, 1.0).unwrap();
        let v = t.value(y);
        assert!((v[0] - 0.045).abs() < 1e-12);
        assert!((v[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn relu_subgradient_zero_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, -1.0, 2.0], 1, 3).unwrap();
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let a = t
                .constant(vec![0.3, -0.7, 0.11, 0.999], 2, 2)
                .unwrap();
            let b = t.sigmoid(a).unwrap();
            let c = t.matmul(b, a).unwrap();
            let s = t.softmax(c).unwrap();
            t.value(s).to_vec()
        };
        let x = build();
        let y = build();
        assert_eq!(x, y);
    }
}
