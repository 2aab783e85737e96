use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::tensor::Tensor;
use super::unary::Unary;
use crate::error::{Error, Result};

/// Storage precision of values recorded on a tape.
///
/// `F32` rounds every recorded value to single precision; arithmetic itself
/// still runs in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Unary(usize, Unary),
    RowSum(usize),
    ColSum(usize),
    SumAll(usize),
    ColBroadcast(usize),
    RowBroadcast(usize),
    Fill(usize),
    MulScalar(usize, usize),
    PairExpandI(usize),
    PairExpandJ(usize),
    PairReduceI(usize),
    PairReduceJ(usize),
    GroupSum(usize, usize),
    GroupExpand(usize, usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    ConcatCols(Vec<usize>),
    Gather(usize, Arc<[usize]>),
    ScatterAdd(usize, Arc<[usize]>),
    Reshape(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulScalar(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::ConcatCols(xs) => xs.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(a, _)
            | Op::RowSum(a)
            | Op::ColSum(a)
            | Op::SumAll(a)
            | Op::ColBroadcast(a)
            | Op::RowBroadcast(a)
            | Op::Fill(a)
            | Op::PairExpandI(a)
            | Op::PairExpandJ(a)
            | Op::PairReduceI(a)
            | Op::PairReduceJ(a)
            | Op::GroupSum(a, _)
            | Op::GroupExpand(a, _)
            | Op::SliceCols(a, _)
            | Op::PadCols(a, _)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _)
            | Op::Reshape(a) => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Unary(_, f) => f.name(),
            Op::RowSum(_) => "row_sum",
            Op::ColSum(_) => "col_sum",
            Op::SumAll(_) => "sum_all",
            Op::ColBroadcast(_) => "col_broadcast",
            Op::RowBroadcast(_) => "row_broadcast",
            Op::Fill(_) => "fill",
            Op::MulScalar(..) => "mul_scalar",
            Op::PairExpandI(_) => "pair_expand_i",
            Op::PairExpandJ(_) => "pair_expand_j",
            Op::PairReduceI(_) => "pair_reduce_i",
            Op::PairReduceJ(_) => "pair_reduce_j",
            Op::GroupSum(..) => "group_sum",
            Op::GroupExpand(..) => "group_expand",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Append-only record of tensor operations for reverse-mode differentiation.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order. Gradients produced by [`Tape::grad`] are recorded on the
/// same tape and can be differentiated again.
///
/// A tape is single-threaded; use one tape per molecule and per worker.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data)
}

fn atom_count(pairs: usize, op: &'static str, cols: usize) -> Result<usize> {
    let n = (pairs as f64).sqrt().round() as usize;
    if n * n != pairs {
        return Err(Error::Shape {
            op,
            lhs: (pairs, cols),
            rhs: (n, n),
        });
    }
    Ok(n)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                precision,
            }),
        }
    }

    pub fn precision(&self) -> Precision {
        self.inner.borrow().precision
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(Op::Leaf, Arc::new(value), true)
    }

    /// Differentiable input sharing storage with the caller (model parameters).
    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Result<Var<'_>> {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(Op::Leaf, Arc::new(value), false)
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        self.constant(Tensor::scalar(value))
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn push(&self, op: Op, value: Arc<Tensor>, leaf_grad: bool) -> Result<Var<'_>> {
        let mut inner = self.inner.borrow_mut();
        let value = if inner.precision == Precision::F32 {
            Arc::new(value.map(|v| v as f32 as f64))
        } else {
            value
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => leaf_grad,
            other => other.inputs().iter().any(|&i| inner.nodes[i].requires_grad),
        };
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    fn record(&self, op: Op, value: Tensor) -> Result<Var<'_>> {
        self.push(op, Arc::new(value), false)
    }

    /// Gradients of the scalar `root` with respect to each of `wrt`.
    ///
    /// The returned gradients are tape values; they can appear inside a new
    /// objective and be differentiated again. Inputs that `root` does not
    /// depend on receive a zero constant of matching shape.
    pub fn grad<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let (r, c) = root.shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot(r, c));
        }
        let n = root.id + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n {
                relevant[w.id] = true;
            }
        }
        {
            let inner = self.inner.borrow();
            for id in 0..n {
                let node = &inner.nodes[id];
                if relevant[id] || !node.requires_grad {
                    continue;
                }
                relevant[id] = node.op.inputs().iter().any(|&i| relevant[i]);
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        if relevant[root.id] {
            grads[root.id] = Some(self.scalar(1.0)?);
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id] else { continue };
            if !relevant[id] {
                continue;
            }
            let op = self.inner.borrow().nodes[id].op.clone();
            for (input, contrib) in self.vjp(&op, id, g, &relevant)? {
                grads[input] = Some(match grads[input] {
                    Some(acc) => acc.add(contrib)?,
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let (r, c) = w.shape();
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect()
    }

    fn vjp<'t>(
        &'t self,
        op: &Op,
        out: usize,
        g: Var<'t>,
        relevant: &[bool],
    ) -> Result<Vec<(usize, Var<'t>)>> {
        let var = |id| Var { tape: self, id };
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if relevant[a] {
                    res.push((a, g));
                }
                if relevant[b] {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if relevant[a] {
                    res.push((a, g));
                }
                if relevant[b] {
                    res.push((b, g.scale(-1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if relevant[a] {
                    res.push((a, g.mul(var(b))?));
                }
                if relevant[b] {
                    res.push((b, g.mul(var(a))?));
                }
            }
            Op::Scale(a, s) => res.push((a, g.scale(s)?)),
            Op::AddScalar(a) => res.push((a, g)),
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (var(a), var(b));
                if relevant[a] {
                    let ga = if ta {
                        self.matmul_t(vb, g, tb, true)?
                    } else {
                        self.matmul_t(g, vb, false, !tb)?
                    };
                    res.push((a, ga));
                }
                if relevant[b] {
                    let gb = if tb {
                        self.matmul_t(g, va, true, ta)?
                    } else {
                        self.matmul_t(va, g, !ta, false)?
                    };
                    res.push((b, gb));
                }
            }
            Op::Unary(a, f) => {
                let contrib = match f {
                    Unary::Exp => Some(g.mul(var(out))?),
                    _ => match f.derivative()? {
                        Unary::Const(c) if c == 0.0 => None,
                        Unary::Const(c) => Some(g.scale(c)?),
                        d => Some(g.mul(var(a).unary(d)?)?),
                    },
                };
                if let Some(c) = contrib {
                    res.push((a, c));
                }
            }
            Op::RowSum(a) => res.push((a, g.col_broadcast(var(a).shape().1)?)),
            Op::ColSum(a) => res.push((a, g.row_broadcast(var(a).shape().0)?)),
            Op::SumAll(a) => {
                let (r, c) = var(a).shape();
                res.push((a, g.fill(r, c)?));
            }
            Op::ColBroadcast(a) => res.push((a, g.row_sum()?)),
            Op::RowBroadcast(a) => res.push((a, g.col_sum()?)),
            Op::Fill(a) => res.push((a, g.sum_all()?)),
            Op::MulScalar(a, s) => {
                if relevant[a] {
                    res.push((a, g.mul_scalar(var(s))?));
                }
                if relevant[s] {
                    res.push((s, g.mul(var(a))?.sum_all()?));
                }
            }
            Op::PairExpandI(a) => res.push((a, g.pair_reduce_i()?)),
            Op::PairExpandJ(a) => res.push((a, g.pair_reduce_j()?)),
            Op::PairReduceI(a) => res.push((a, g.pair_expand_i()?)),
            Op::PairReduceJ(a) => res.push((a, g.pair_expand_j()?)),
            Op::GroupSum(a, w) => res.push((a, g.group_expand(w)?)),
            Op::GroupExpand(a, w) => res.push((a, g.group_sum(w)?)),
            Op::SliceCols(a, start) => res.push((a, g.pad_cols(start, var(a).shape().1)?)),
            Op::PadCols(a, start) => res.push((a, g.slice_cols(start, var(a).shape().1)?)),
            Op::ConcatCols(ref xs) => {
                let mut offset = 0;
                for &x in xs {
                    let w = var(x).shape().1;
                    if relevant[x] {
                        res.push((x, g.slice_cols(offset, w)?));
                    }
                    offset += w;
                }
            }
            Op::Gather(a, ref idx) => {
                res.push((a, g.scatter_add(Arc::clone(idx), var(a).shape().0)?));
            }
            Op::ScatterAdd(a, ref idx) => res.push((a, g.gather(Arc::clone(idx))?)),
            Op::Reshape(a) => {
                let (r, c) = var(a).shape();
                res.push((a, g.reshape(r, c)?));
            }
        }
        Ok(res)
    }

    fn matmul_t<'t>(&'t self, a: Var<'t>, b: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let value = Tensor::matmul(&a.value(), &b.value(), ta, tb)?;
        self.record(
            Op::MatMul {
                a: a.id,
                b: b.id,
                ta,
                tb,
            },
            value,
        )
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.inner.borrow().nodes[self.id].value.shape()
    }

    /// Scalar value of a `1 x 1` var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Constant copy of this value; gradients do not flow through it.
    pub fn detach(&self) -> Result<Var<'t>> {
        self.tape.push(Op::Leaf, self.value(), false)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let value = zip_map(&self.value(), &other.value(), op.name(), f)?;
        self.tape.record(op, value)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let value = self.value().map(|v| v * s);
        self.tape.record(Op::Scale(self.id, s), value)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let value = self.value().map(|v| v + s);
        self.tape.record(Op::AddScalar(self.id), value)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.matmul_t(self, other, false, false)
    }

    /// `self * other^T`
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.matmul_t(self, other, false, true)
    }

    pub fn unary(self, f: Unary) -> Result<Var<'t>> {
        let value = self.value().map(|v| f.eval(v));
        self.tape.record(Op::Unary(self.id, f), value)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Unary::Square)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(Unary::Abs)
    }

    pub fn elu(self) -> Result<Var<'t>> {
        self.unary(Unary::Elu)
    }

    pub fn swish(self) -> Result<Var<'t>> {
        self.unary(Unary::Swish)
    }

    /// `(n x c) -> (n x 1)`
    pub fn row_sum(self) -> Result<Var<'t>> {
        let v = self.value();
        let value = Tensor::from_fn(v.rows(), 1, |r, _| v.row(r).iter().sum());
        self.tape.record(Op::RowSum(self.id), value)
    }

    /// `(n x c) -> (1 x c)`
    pub fn col_sum(self) -> Result<Var<'t>> {
        let v = self.value();
        let mut out = Tensor::zeros(1, v.cols());
        for r in 0..v.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        self.tape.record(Op::ColSum(self.id), out)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.record(Op::SumAll(self.id), value)
    }

    /// `(n x 1) -> (n x cols)`
    pub fn col_broadcast(self, cols: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.cols() != 1 {
            return Err(Error::Shape {
                op: "col_broadcast",
                lhs: v.shape(),
                rhs: (v.rows(), 1),
            });
        }
        let value = Tensor::from_fn(v.rows(), cols, |r, _| v.get(r, 0));
        self.tape.record(Op::ColBroadcast(self.id), value)
    }

    /// `(1 x c) -> (rows x c)`
    pub fn row_broadcast(self, rows: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.rows() != 1 {
            return Err(Error::Shape {
                op: "row_broadcast",
                lhs: v.shape(),
                rhs: (1, v.cols()),
            });
        }
        let value = Tensor::from_fn(rows, v.cols(), |_, c| v.get(0, c));
        self.tape.record(Op::RowBroadcast(self.id), value)
    }

    /// `(1 x 1) -> (rows x cols)`
    pub fn fill(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "fill",
                lhs: v.shape(),
                rhs: (1, 1),
            });
        }
        let value = Tensor::full(rows, cols, v.item());
        self.tape.record(Op::Fill(self.id), value)
    }

    /// Multiply every element by the `1 x 1` var `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "mul_scalar",
                lhs: self.shape(),
                rhs: sv.shape(),
            });
        }
        let k = sv.item();
        let value = self.value().map(|v| v * k);
        self.tape.record(Op::MulScalar(self.id, s.id), value)
    }

    /// `(N x c) -> (N*N x c)`, row `i*N + j` holds row `i`.
    pub fn pair_expand_i(self) -> Result<Var<'t>> {
        let v = self.value();
        let n = v.rows();
        let value = Tensor::from_fn(n * n, v.cols(), |p, c| v.get(p / n, c));
        self.tape.record(Op::PairExpandI(self.id), value)
    }

    /// `(N x c) -> (N*N x c)`, row `i*N + j` holds row `j`.
    pub fn pair_expand_j(self) -> Result<Var<'t>> {
        let v = self.value();
        let n = v.rows();
        let value = Tensor::from_fn(n * n, v.cols(), |p, c| v.get(p % n, c));
        self.tape.record(Op::PairExpandJ(self.id), value)
    }

    /// `(N*N x c) -> (N x c)`, summing over `j` for each `i`.
    pub fn pair_reduce_i(self) -> Result<Var<'t>> {
        let v = self.value();
        let n = atom_count(v.rows(), "pair_reduce_i", v.cols())?;
        let mut out = Tensor::zeros(n, v.cols());
        let cols = v.cols();
        for p in 0..n * n {
            let i = p / n;
            let dst = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for (o, x) in dst.iter_mut().zip(v.row(p)) {
                *o += x;
            }
        }
        self.tape.record(Op::PairReduceI(self.id), out)
    }

    /// `(N*N x c) -> (N x c)`, summing over `i` for each `j`.
    pub fn pair_reduce_j(self) -> Result<Var<'t>> {
        let v = self.value();
        let n = atom_count(v.rows(), "pair_reduce_j", v.cols())?;
        let mut out = Tensor::zeros(n, v.cols());
        let cols = v.cols();
        for p in 0..n * n {
            let j = p % n;
            let dst = &mut out.data_mut()[j * cols..(j + 1) * cols];
            for (o, x) in dst.iter_mut().zip(v.row(p)) {
                *o += x;
            }
        }
        self.tape.record(Op::PairReduceJ(self.id), out)
    }

    /// Sums contiguous column groups of `width`: `(r x g*width) -> (r x g)`.
    pub fn group_sum(self, width: usize) -> Result<Var<'t>> {
        let v = self.value();
        if width == 0 || v.cols() % width != 0 {
            return Err(Error::Shape {
                op: "group_sum",
                lhs: v.shape(),
                rhs: (1, width),
            });
        }
        let groups = v.cols() / width;
        let value = Tensor::from_fn(v.rows(), groups, |r, gi| {
            v.row(r)[gi * width..(gi + 1) * width].iter().sum()
        });
        self.tape.record(Op::GroupSum(self.id, width), value)
    }

    /// Repeats each column `width` times: `(r x g) -> (r x g*width)`.
    pub fn group_expand(self, width: usize) -> Result<Var<'t>> {
        let v = self.value();
        let value = Tensor::from_fn(v.rows(), v.cols() * width, |r, c| v.get(r, c / width));
        self.tape.record(Op::GroupExpand(self.id, width), value)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start + len > v.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: v.shape(),
                rhs: (start, len),
            });
        }
        let value = Tensor::from_fn(v.rows(), len, |r, c| v.get(r, start + c));
        self.tape.record(Op::SliceCols(self.id, start), value)
    }

    /// Places the columns at `start` inside a zero matrix `total` wide.
    pub fn pad_cols(self, start: usize, total: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start + v.cols() > total {
            return Err(Error::Shape {
                op: "pad_cols",
                lhs: v.shape(),
                rhs: (start, total),
            });
        }
        let w = v.cols();
        let value = Tensor::from_fn(v.rows(), total, |r, c| {
            if c >= start && c < start + w {
                v.get(r, c - start)
            } else {
                0.0
            }
        });
        self.tape.record(Op::PadCols(self.id, start), value)
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat_cols of zero tensors"))?;
        let tape = first.tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = values[0].rows();
        if let Some(bad) = values.iter().find(|v| v.rows() != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: values[0].shape(),
                rhs: bad.shape(),
            });
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let value = Tensor::new(rows, total, data)?;
        tape.record(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), value)
    }

    /// Row `k` of the result is row `index[k]` of `self`.
    pub fn gather(self, index: Arc<[usize]>) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: v.shape(),
                rhs: (bad, 0),
            });
        }
        let mut data = Vec::with_capacity(index.len() * v.cols());
        for &i in index.iter() {
            data.extend_from_slice(v.row(i));
        }
        let value = Tensor::new(index.len(), v.cols(), data)?;
        self.tape.record(Op::Gather(self.id, index), value)
    }

    /// Adjoint of [`Var::gather`]: row `k` of `self` is added into row
    /// `index[k]` of a `rows`-row zero matrix.
    pub fn scatter_add(self, index: Arc<[usize]>, rows: usize) -> Result<Var<'t>> {
        let v = self.value();
        if index.len() != v.rows() || index.iter().any(|&i| i >= rows) {
            return Err(Error::Shape {
                op: "scatter_add",
                lhs: v.shape(),
                rhs: (index.len(), rows),
            });
        }
        let cols = v.cols();
        let mut out = Tensor::zeros(rows, cols);
        for (k, &i) in index.iter().enumerate() {
            let dst = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for (o, x) in dst.iter_mut().zip(v.row(k)) {
                *o += x;
            }
        }
        self.tape.record(Op::ScatterAdd(self.id, index), out)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value();
        let value = Tensor::new(rows, cols, v.data().to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: v.shape(),
            rhs: (rows, cols),
        })?;
        self.tape.record(Op::Reshape(self.id), value)
    }

    /// Layer normalization over the last axis with an affine `gain`/`bias`
    /// (each `1 x d`).
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (n, d) = self.shape();
        if gain.shape() != (1, d) || bias.shape() != (1, d) {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: (n, d),
                rhs: gain.shape(),
            });
        }
        let inv_d = 1.0 / d as f64;
        let mean = self.row_sum()?.scale(inv_d)?;
        let centered = self.sub(mean.col_broadcast(d)?)?;
        let var = centered.square()?.row_sum()?.scale(inv_d)?;
        let inv_std = var.add_scalar(eps)?.unary(Unary::Pow {
            coef: 1.0,
            exp: -0.5,
        })?;
        let normed = centered.mul(inv_std.col_broadcast(d)?)?;
        normed.mul(gain.row_broadcast(n)?)?.add(bias.row_broadcast(n)?)
    }

    /// Row-wise softmax, stabilized by subtracting the (detached) row max.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let v = self.value();
        let maxes = Tensor::from_fn(v.rows(), 1, |r, _| {
            v.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)
        });
        let cols = v.cols();
        let shift = self.tape.constant(maxes)?.col_broadcast(cols)?;
        let e = self.sub(shift)?.exp()?;
        let inv = e.row_sum()?.unary(Unary::Pow {
            coef: 1.0,
            exp: -1.0,
        })?;
        e.mul(inv.col_broadcast(cols)?)
    }
}
