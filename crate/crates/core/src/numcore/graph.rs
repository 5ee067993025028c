//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Leaf
//! gradients accumulate across `backward` calls until [`Graph::zero_grad`];
//! training code builds a fresh graph per optimizer step.

use std::collections::HashMap;

use super::error::{dim_err, NumError, Result};
use super::linalg::{self, JitterPolicy};
use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Square,
    Cos,
    Relu,
    Elu,
    Softplus,
    ClampMin,
    Sum,
    SumRows,
    SumCols,
    Cholesky,
    TriSolve,
    Diag,
    CholFactor,
    SqDist,
    Matern32,
    LogSoftmax,
    ConcatCols,
    SliceCols,
}

impl OpKind {
    pub const ALL: [OpKind; 31] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::Square,
        OpKind::Cos,
        OpKind::Relu,
        OpKind::Elu,
        OpKind::Softplus,
        OpKind::ClampMin,
        OpKind::Sum,
        OpKind::SumRows,
        OpKind::SumCols,
        OpKind::Cholesky,
        OpKind::TriSolve,
        OpKind::Diag,
        OpKind::CholFactor,
        OpKind::SqDist,
        OpKind::Matern32,
        OpKind::LogSoftmax,
        OpKind::ConcatCols,
        OpKind::SliceCols,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Cos => "cos",
            OpKind::Relu => "relu",
            OpKind::Elu => "elu",
            OpKind::Softplus => "softplus",
            OpKind::ClampMin => "clamp_min",
            OpKind::Sum => "sum",
            OpKind::SumRows => "sum_rows",
            OpKind::SumCols => "sum_cols",
            OpKind::Cholesky => "cholesky",
            OpKind::TriSolve => "triangular_solve",
            OpKind::Diag => "diag",
            OpKind::CholFactor => "chol_factor",
            OpKind::SqDist => "pairwise_sqdist",
            OpKind::Matern32 => "matern32_profile",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Cos(Var),
    Relu(Var),
    Elu(Var, f64),
    Softplus(Var),
    ClampMin(Var, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Cholesky(Var),
    TriSolve { t: Var, b: Var, lower: bool },
    Diag(Var),
    CholFactor(Var),
    SqDist { a: Var, b: Var, same: bool },
    Matern32(Var),
    LogSoftmax(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Neg(_) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Square(_) => OpKind::Square,
            Op::Cos(_) => OpKind::Cos,
            Op::Relu(_) => OpKind::Relu,
            Op::Elu(..) => OpKind::Elu,
            Op::Softplus(_) => OpKind::Softplus,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Sum(_) => OpKind::Sum,
            Op::SumRows(_) => OpKind::SumRows,
            Op::SumCols(_) => OpKind::SumCols,
            Op::Cholesky(_) => OpKind::Cholesky,
            Op::TriSolve { .. } => OpKind::TriSolve,
            Op::Diag(_) => OpKind::Diag,
            Op::CholFactor(_) => OpKind::CholFactor,
            Op::SqDist { .. } => OpKind::SqDist,
            Op::Matern32(_) => OpKind::Matern32,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols(..) => OpKind::SliceCols,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Tensor>,
    jitter: JitterPolicy,
    fault: Option<OpKind>,
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => dim_err(op, format!("cannot broadcast {a:?} with {b:?}")),
    }
}

#[inline]
fn bget(t: &Tensor, i: usize, j: usize) -> f64 {
    let r = if t.rows() == 1 { 0 } else { i };
    let c = if t.cols() == 1 { 0 } else { j };
    t.get(r, c)
}

fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    shape: (usize, usize),
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    if a.shape() == shape && b.shape() == shape {
        return a.zip_map(b, f).expect("same shape");
    }
    Tensor::from_fn(shape.0, shape.1, |i, j| f(bget(a, i, j), bget(b, i, j)))
}

/// Sums `g` down to `shape` over the broadcast dimensions.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let r = if shape.0 == 1 { 0 } else { i };
            let c = if shape.1 == 1 { 0 } else { j };
            let v = out.get(r, c) + g.get(i, j);
            out.set(r, c, v);
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// `g(u) = (1 + √(3u))·exp(−√(3u))`, the Matérn-3/2 profile as a function of
/// the length-scale-normalized squared distance.
pub fn matern32_profile(u: f64) -> f64 {
    let r = SQRT3 * u.max(0.0).sqrt();
    (1.0 + r) * (-r).exp()
}

fn matern32_profile_deriv(u: f64) -> f64 {
    -1.5 * (-SQRT3 * u.max(0.0).sqrt()).exp()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose Cholesky nodes use a custom jitter ladder.
    pub fn with_jitter(jitter: JitterPolicy) -> Self {
        Self {
            jitter,
            ..Self::default()
        }
    }

    /// Corrupts the backward rule of one op kind by a 1% scale factor.
    /// Only meant for negative controls in the self-check.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a differentiable leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::gemm(self.value(a), false, self.value(b), false)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let v = broadcast_zip(self.value(a), self.value(b), shape, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, op, rg))
    }

    /// Elementwise sum with broadcasting of `1×1`, `1×c` and `r×1` operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(v, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { alpha * x.exp_m1() },
            Op::Elu(a, alpha),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, move |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// Column sums, `1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = Tensor::zeros(1, t.cols());
        for i in 0..t.rows() {
            for (o, x) in v.data_mut().iter_mut().zip(t.row_slice(i)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::SumRows(a), rg)
    }

    /// Row sums, `r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::column((0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect());
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    /// Lower Cholesky factor of a symmetric matrix using the graph's jitter
    /// ladder; the jitter is treated as a constant.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let chol = linalg::cholesky(self.value(a), self.jitter)?;
        let rg = self.rg(a);
        Ok(self.push(chol.l, Op::Cholesky(a), rg))
    }

    /// Solves `t·x = b` for triangular `t` (lower or upper).
    pub fn triangular_solve(&mut self, t: Var, b: Var, lower: bool) -> Result<Var> {
        let v = linalg::solve_triangular(self.value(t), self.value(b), lower, false)?;
        let rg = self.rg(t) || self.rg(b);
        Ok(self.push(v, Op::TriSolve { t, b, lower }, rg))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != t.cols() {
            return dim_err("diag", format!("non-square {:?}", t.shape()));
        }
        let v = Tensor::column(t.diag());
        let rg = self.rg(a);
        Ok(self.push(v, Op::Diag(a), rg))
    }

    /// Maps an unconstrained square matrix to a lower-triangular factor with
    /// positive diagonal: strict lower part kept, diagonal exponentiated.
    pub fn chol_factor(&mut self, raw: Var) -> Result<Var> {
        let t = self.value(raw);
        if t.rows() != t.cols() {
            return dim_err("chol_factor", format!("non-square {:?}", t.shape()));
        }
        let v = Tensor::from_fn(t.rows(), t.cols(), |i, j| {
            if j < i {
                t.get(i, j)
            } else if i == j {
                t.get(i, i).exp()
            } else {
                0.0
            }
        });
        let rg = self.rg(raw);
        Ok(self.push(v, Op::CholFactor(raw), rg))
    }

    /// Squared Euclidean distances between rows; passing the same var twice
    /// yields an exactly zero diagonal.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let same = a == b;
        let v = if same {
            linalg::self_sqdist(self.value(a))
        } else {
            linalg::pairwise_sqdist(self.value(a), self.value(b))?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::SqDist { a, b, same }, rg))
    }

    /// Elementwise Matérn-3/2 profile of normalized squared distances.
    pub fn matern32(&mut self, u: Var) -> Var {
        self.unary(u, matern32_profile, Op::Matern32(u))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = t.clone();
        for i in 0..t.rows() {
            let row = v.row_slice_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmax(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::ConcatCols(a, b), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return dim_err(
                "slice_cols",
                format!("range {start}..{end} of {} columns", t.cols()),
            );
        }
        let v = Tensor::from_fn(t.rows(), end - start, |i, j| t.get(i, start + j));
        let rg = self.rg(a);
        Ok(self.push(v, Op::SliceCols(a, start), rg))
    }

    /// Backpropagates from a scalar root, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(NumError::Contract(format!(
                "backward root must be 1x1, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            let mut contribs = self.local_grads(i, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, t) in contribs.iter_mut() {
                    t.map_inplace(|x| x * 1.01);
                }
            }
            for (p, t) in contribs {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::with_capacity(2);
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(a) {
                    res.push((a, linalg::gemm(g, false, val(b), true)?));
                }
                if need(b) {
                    res.push((b, linalg::gemm(val(a), true, g, false)?));
                }
            }
            Op::Transpose(a) => res.push((a, g.transpose())),
            Op::Add(a, b) => {
                if need(a) {
                    res.push((a, reduce_to(g.clone(), val(a).shape())));
                }
                if need(b) {
                    res.push((b, reduce_to(g.clone(), val(b).shape())));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    res.push((a, reduce_to(g.clone(), val(a).shape())));
                }
                if need(b) {
                    res.push((b, reduce_to(g.scale(-1.0), val(b).shape())));
                }
            }
            Op::Mul(a, b) => {
                let shape = g.shape();
                if need(a) {
                    let ga = broadcast_zip(g, val(b), shape, |x, y| x * y);
                    res.push((a, reduce_to(ga, val(a).shape())));
                }
                if need(b) {
                    let gb = broadcast_zip(g, val(a), shape, |x, y| x * y);
                    res.push((b, reduce_to(gb, val(b).shape())));
                }
            }
            Op::Div(a, b) => {
                let shape = g.shape();
                if need(a) {
                    let ga = broadcast_zip(g, val(b), shape, |x, y| x / y);
                    res.push((a, reduce_to(ga, val(a).shape())));
                }
                if need(b) {
                    // d(a/b)/db = -out/b
                    let t = broadcast_zip(out, val(b), shape, |o, y| -o / y);
                    let gb = g.zip_map(&t, |x, y| x * y)?;
                    res.push((b, reduce_to(gb, val(b).shape())));
                }
            }
            Op::Neg(a) => res.push((a, g.scale(-1.0))),
            Op::Scale(a, s) => res.push((a, g.scale(s))),
            Op::AddScalar(a) => res.push((a, g.clone())),
            Op::Exp(a) => res.push((a, g.zip_map(out, |x, o| x * o)?)),
            Op::Log(a) => res.push((a, g.zip_map(val(a), |x, y| x / y)?)),
            Op::Sqrt(a) => res.push((a, g.zip_map(out, |x, o| 0.5 * x / o)?)),
            Op::Square(a) => res.push((a, g.zip_map(val(a), |x, y| 2.0 * x * y)?)),
            Op::Cos(a) => res.push((a, g.zip_map(val(a), |x, y| -x * y.sin())?)),
            Op::Relu(a) => res.push((a, g.zip_map(val(a), |x, y| if y > 0.0 { x } else { 0.0 })?)),
            Op::Elu(a, alpha) => {
                let t = val(a).zip_map(out, |y, o| if y > 0.0 { 1.0 } else { o + alpha })?;
                res.push((a, g.zip_map(&t, |x, d| x * d)?));
            }
            Op::Softplus(a) => res.push((a, g.zip_map(val(a), |x, y| x * sigmoid(y))?)),
            Op::ClampMin(a, floor) => {
                res.push((a, g.zip_map(val(a), |x, y| if y > floor { x } else { 0.0 })?))
            }
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                res.push((a, Tensor::full(r, c, g.item())));
            }
            Op::SumRows(a) => {
                let (r, c) = val(a).shape();
                res.push((a, Tensor::from_fn(r, c, |_, j| g.get(0, j))));
            }
            Op::SumCols(a) => {
                let (r, c) = val(a).shape();
                res.push((a, Tensor::from_fn(r, c, |i, _| g.get(i, 0))));
            }
            Op::Cholesky(a) => res.push((a, cholesky_backward(out, g)?)),
            Op::TriSolve { t, b, lower } => {
                // x = T⁻¹B: B̄ = T⁻ᵀX̄, T̄ = −B̄Xᵀ restricted to T's triangle
                let gb = linalg::solve_triangular(val(t), g, lower, true)?;
                if need(t) {
                    let full = linalg::gemm(&gb, false, out, true)?;
                    let n = full.rows();
                    let gt = Tensor::from_fn(n, n, |r, c| {
                        let inside = if lower { c <= r } else { c >= r };
                        if inside {
                            -full.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    res.push((t, gt));
                }
                if need(b) {
                    res.push((b, gb));
                }
            }
            Op::Diag(a) => {
                let n = val(a).rows();
                let mut ga = Tensor::zeros(n, n);
                for k in 0..n {
                    ga.set(k, k, g.get(k, 0));
                }
                res.push((a, ga));
            }
            Op::CholFactor(raw) => {
                let n = out.rows();
                let ga = Tensor::from_fn(n, n, |r, c| {
                    if c < r {
                        g.get(r, c)
                    } else if c == r {
                        g.get(r, r) * out.get(r, r)
                    } else {
                        0.0
                    }
                });
                res.push((raw, ga));
            }
            Op::SqDist { a, b, same } => {
                // D_ij = |a_i|² + |b_j|² − 2a_i·b_j (active entries only)
                let gm = out.zip_map(g, |d, x| if d > 0.0 { x } else { 0.0 })?;
                let av = val(a);
                let bv = val(b);
                let rows_g: Vec<f64> = (0..gm.rows()).map(|r| gm.row_slice(r).iter().sum()).collect();
                let mut cols_g = vec![0.0; gm.cols()];
                for r in 0..gm.rows() {
                    for (c, x) in gm.row_slice(r).iter().enumerate() {
                        cols_g[c] += x;
                    }
                }
                let mut ga = if need(a) {
                    let gb_prod = linalg::gemm(&gm, false, bv, false)?;
                    Some(Tensor::from_fn(av.rows(), av.cols(), |r, k| {
                        2.0 * (rows_g[r] * av.get(r, k) - gb_prod.get(r, k))
                    }))
                } else {
                    None
                };
                if same {
                    // gradient from both argument slots lands on one input
                    let ga_b = {
                        let ga_prod = linalg::gemm(&gm, true, av, false)?;
                        Tensor::from_fn(bv.rows(), bv.cols(), |r, k| {
                            2.0 * (cols_g[r] * bv.get(r, k) - ga_prod.get(r, k))
                        })
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga.add_assign(&ga_b);
                    }
                    if let Some(ga) = ga {
                        res.push((a, ga));
                    }
                } else {
                    if let Some(ga) = ga {
                        res.push((a, ga));
                    }
                    if need(b) {
                        let ga_prod = linalg::gemm(&gm, true, av, false)?;
                        res.push((
                            b,
                            Tensor::from_fn(bv.rows(), bv.cols(), |r, k| {
                                2.0 * (cols_g[r] * bv.get(r, k) - ga_prod.get(r, k))
                            }),
                        ));
                    }
                }
            }
            Op::Matern32(u) => {
                res.push((u, g.zip_map(val(u), |x, y| x * matern32_profile_deriv(y))?))
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let gs: f64 = g.row_slice(r).iter().sum();
                    let o = out.row_slice(r);
                    for (x, lo) in ga.row_slice_mut(r).iter_mut().zip(o) {
                        *x -= lo.exp() * gs;
                    }
                }
                res.push((a, ga));
            }
            Op::ConcatCols(a, b) => {
                let ca = val(a).cols();
                let (r, c) = g.shape();
                if need(a) {
                    res.push((a, Tensor::from_fn(r, ca, |i, j| g.get(i, j))));
                }
                if need(b) {
                    res.push((b, Tensor::from_fn(r, c - ca, |i, j| g.get(i, ca + j))));
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(a).shape();
                let w = g.cols();
                res.push((
                    a,
                    Tensor::from_fn(r, c, |i, j| {
                        if j >= start && j < start + w {
                            g.get(i, j - start)
                        } else {
                            0.0
                        }
                    }),
                ));
            }
        }
        Ok(res)
    }
}

/// Reverse rule for `L = chol(A)`: `Ā = sym(L⁻ᵀ Φ(LᵀL̄) L⁻¹)` where `Φ` keeps
/// the lower triangle and halves the diagonal.
fn cholesky_backward(l: &Tensor, lbar: &Tensor) -> Result<Tensor> {
    let n = l.rows();
    let lbar = linalg::tril(lbar);
    let m = linalg::gemm(l, true, &lbar, false)?;
    let phi = Tensor::from_fn(n, n, |i, j| {
        if j < i {
            m.get(i, j)
        } else if i == j {
            0.5 * m.get(i, i)
        } else {
            0.0
        }
    });
    // X = L⁻ᵀ Φ, then Ā = X L⁻¹ = (L⁻ᵀ Xᵀ)ᵀ
    let x = linalg::solve_triangular(l, &phi, true, true)?;
    let y = linalg::solve_triangular(l, &x.transpose(), true, true)?;
    let abar = y.transpose();
    Ok(Tensor::from_fn(n, n, |i, j| 0.5 * (abar.get(i, j) + abar.get(j, i))))
}
