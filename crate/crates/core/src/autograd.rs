//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; vectors are `1 × n` rows and scalars are
//! `1 × 1`. A [`Tape`] records operations eagerly as they are applied to
//! [`Var`] handles, and [`Tape::backward`] walks the record in reverse.
//! Nodes that do not depend on any gradient-requiring leaf are skipped during
//! the backward sweep, so frozen parameters cost nothing beyond their forward
//! use.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use ndarray::{Array2, Axis};

pub type Matrix = Array2<f64>;

/// Marker used in gather indices for "produce zero here".
pub const ZERO_INDEX: usize = usize::MAX;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Arc<Matrix>),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Gelu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Softplus(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        xhat: Arc<Matrix>,
        inv_std: Arc<Vec<f64>>,
    },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SumCols(usize),
    Transpose(usize),
    Gather {
        x: usize,
        index: Arc<Vec<usize>>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for a single forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Matrix {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Matrix::zeros((r, c))
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Matrix>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Matrix> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A leaf that participates in differentiation.
    pub fn variable(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf sharing storage with an existing matrix (used for parameters).
    pub fn leaf_shared(&self, value: Arc<Matrix>, requires_grad: bool) -> Var<'_> {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Matrix::from_elem((1, 1), v))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let values: Vec<Arc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|p| p.requires_grad());
        self.push(
            out,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let values: Vec<Arc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|p| p.requires_grad());
        self.push(
            out,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert_eq!(loss.shape(), (1, 1), "backward expects a scalar loss");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Matrix::ones((1, 1)));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let rg = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.dot(val(*b).as_ref()));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.t().dot(val(*a).as_ref()));
                    }
                }
                Op::Add(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, b) => {
                    if rg(*b) {
                        let gb = (&g * val(*a).as_ref())
                            .sum_axis(Axis(0))
                            .insert_axis(Axis(0));
                        accumulate(&mut grads, *b, gb);
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, &g * &val(*b).row(0));
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, &g * val(*b).as_ref());
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, &g * val(*a).as_ref());
                    }
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * c.as_ref()),
                Op::Scale(a, s) => accumulate(&mut grads, *a, g * *s),
                Op::ScaleBy(a, s) => {
                    let sv = val(*s)[[0, 0]];
                    if rg(*s) {
                        let ds = (&g * val(*a).as_ref()).sum();
                        accumulate(&mut grads, *s, Matrix::from_elem((1, 1), ds));
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g * sv);
                    }
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(x.as_ref())
                        .for_each(|d, &x| {
                            *d *= gelu_grad(x);
                        });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(y.as_ref())
                        .for_each(|d, &y| {
                            *d *= y * (1.0 - y);
                        });
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g * node.value.as_ref()),
                Op::Ln(a) => accumulate(&mut grads, *a, g / val(*a).as_ref()),
                Op::Sqrt(a) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(node.value.as_ref())
                        .for_each(|d, &y| *d *= 0.5 / y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(val(*a).as_ref())
                        .for_each(|d, &x| *d *= sigmoid(x));
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref();
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                        drow.zip_mut_with(&yrow, |g, &y| *g = y * (*g - dot));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = node.value.as_ref();
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let total: f64 = drow.sum();
                        drow.zip_mut_with(&yrow, |g, &y| *g -= y.exp() * total);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNormRows { x, xhat, inv_std } => {
                    let n = g.ncols() as f64;
                    let mut d = g;
                    for ((mut drow, xrow), &inv) in d
                        .rows_mut()
                        .into_iter()
                        .zip(xhat.rows())
                        .zip(inv_std.iter())
                    {
                        let sum_g: f64 = drow.sum();
                        let sum_gx: f64 = drow.iter().zip(xrow.iter()).map(|(g, x)| g * x).sum();
                        drow.zip_mut_with(&xrow, |g, &xh| {
                            *g = inv / n * (n * *g - sum_g - xh * sum_gx);
                        });
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).dim();
                    accumulate(&mut grads, *a, Matrix::from_elem((r, c), g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).dim();
                    let v = g[[0, 0]] / (r * c) as f64;
                    accumulate(&mut grads, *a, Matrix::from_elem((r, c), v));
                }
                Op::MeanRows(a) => {
                    let (r, c) = val(*a).dim();
                    let row = g.row(0).mapv(|v| v / r as f64);
                    let d = row.broadcast((r, c)).expect("broadcast").to_owned();
                    accumulate(&mut grads, *a, d);
                }
                Op::SumCols(a) => {
                    let (r, c) = val(*a).dim();
                    let col = g.column(0).to_owned().insert_axis(Axis(1));
                    let d = col.broadcast((r, c)).expect("broadcast").to_owned();
                    accumulate(&mut grads, *a, d);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().as_standard_layout().into_owned())
                }
                Op::Gather { x, index } => {
                    let (r, c) = val(*x).dim();
                    let mut d = vec![0.0; r * c];
                    for (&i, &gv) in index.iter().zip(g.iter()) {
                        if i != ZERO_INDEX {
                            d[i] += gv;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        Matrix::from_shape_vec((r, c), d).expect("shape"),
                    );
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = val(p).nrows();
                        if rg(p) {
                            let piece = g.slice(ndarray::s![start..start + rows, ..]).to_owned();
                            accumulate(&mut grads, p, piece);
                        }
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = val(p).ncols();
                        if rg(p) {
                            let piece = g.slice(ndarray::s![.., start..start + cols]).to_owned();
                            accumulate(&mut grads, p, piece);
                        }
                        start += cols;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Row-wise softmax; entries where `allowed` is false get probability zero.
/// A row with nothing allowed yields all zeros.
pub fn softmax_rows_masked(x: &Matrix, allowed: Option<&[bool]>) -> Matrix {
    let cols = x.ncols();
    let mut out = x.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let ok = |c: usize| allowed.is_none_or(|m| m[r * cols + c]);
        let max = (0..cols)
            .filter(|&c| ok(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for c in 0..cols {
            if ok(c) {
                row[c] = (row[c] - max).exp();
                sum += row[c];
            } else {
                row[c] = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Matrix> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// The single entry of a `1 × 1` value.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, value: Matrix, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Matrix, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().dot(other.value().as_ref());
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().dot(&other.value().t());
        self.binary(other, v, Op::MatMulT(self.id, other.id))
    }

    /// Adds a `1 × n` row to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let r = row.value();
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let v = self.value().as_ref() + &r.row(0);
        self.binary(row, v, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row of `self` elementwise by a `1 × n` row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let r = row.value();
        assert_eq!(r.nrows(), 1, "mul_row expects a single row");
        let v = self.value().as_ref() * &r.row(0);
        self.binary(row, v, Op::MulRow(self.id, row.id))
    }

    pub fn mul_const(self, c: Arc<Matrix>) -> Var<'t> {
        let v = self.value().as_ref() * c.as_ref();
        self.unary(v, Op::MulConst(self.id, c))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().as_ref() * s;
        self.unary(v, Op::Scale(self.id, s))
    }

    /// Multiplies every entry by the `1 × 1` variable `s`.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let sv = s.item();
        let v = self.value().as_ref() * sv;
        self.binary(s, v, Op::ScaleBy(self.id, s.id))
    }

    /// `c - self`, elementwise, with constant `c`.
    pub fn rsub_scalar(self, c: f64) -> Var<'t> {
        let k = self.tape.constant(Matrix::from_elem(self.shape(), c));
        k - self
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let k = self.tape.constant(Matrix::from_elem(self.shape(), c));
        self + k
    }

    pub fn gelu(self) -> Var<'t> {
        let v = self.value().mapv(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().mapv(softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let v = softmax_rows_masked(&self.value(), None);
        self.unary(v, Op::SoftmaxRows(self.id))
    }

    /// Softmax over the entries permitted by the row-major `allowed` mask.
    pub fn masked_softmax_rows(self, allowed: &[bool]) -> Var<'t> {
        let (r, c) = self.shape();
        assert_eq!(allowed.len(), r * c, "mask shape");
        let v = softmax_rows_masked(&self.value(), Some(allowed));
        self.unary(v, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let mut out = x.as_ref().clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.unary(out, Op::LogSoftmaxRows(self.id))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let n = x.ncols() as f64;
        let mut xhat = x.as_ref().clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let xhat = Arc::new(xhat);
        let rg = self.requires_grad();
        self.tape.push_arc(
            Arc::clone(&xhat),
            Op::LayerNormRows {
                x: self.id,
                xhat,
                inv_std: Arc::new(inv_std),
            },
            rg,
        )
    }

    pub fn sum(self) -> Var<'t> {
        let v = Matrix::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let v = Matrix::from_elem((1, 1), x.sum() / x.len() as f64);
        self.unary(v, Op::Mean(self.id))
    }

    /// Column means, as a `1 × cols` row.
    pub fn mean_rows(self) -> Var<'t> {
        let v = self
            .value()
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        self.unary(v, Op::MeanRows(self.id))
    }

    /// Row sums, as a `rows × 1` column.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(v, Op::SumCols(self.id))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().t().as_standard_layout().into_owned();
        self.unary(v, Op::Transpose(self.id))
    }

    /// Builds an `rows × cols` matrix whose entry `k` (row-major) is the
    /// input's flat entry `index[k]`, or zero for [`ZERO_INDEX`].
    pub fn gather(self, rows: usize, cols: usize, index: Arc<Vec<usize>>) -> Var<'t> {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let x = self.value();
        let std_x = x.as_standard_layout();
        let flat = std_x.as_slice().expect("standard layout");
        let data: Vec<f64> = index
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { flat[i] })
            .collect();
        let v = Matrix::from_shape_vec((rows, cols), data).expect("gather shape");
        self.unary(v, Op::Gather { x: self.id, index })
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let (r, c) = self.shape();
        assert!(start <= end && end <= r, "slice_rows out of range");
        let index: Vec<usize> = (start * c..end * c).collect();
        self.gather(end - start, c, Arc::new(index))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let (r, c) = self.shape();
        assert!(start <= end && end <= c, "slice_cols out of range");
        let w = end - start;
        let mut index = Vec::with_capacity(r * w);
        for i in 0..r {
            index.extend((start..end).map(|j| i * c + j));
        }
        self.gather(r, w, Arc::new(index))
    }

    /// The `1 × 1` entry at (`row`, `col`).
    pub fn at(self, row: usize, col: usize) -> Var<'t> {
        let c = self.cols();
        self.gather(1, 1, Arc::new(vec![row * c + col]))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let (r, c) = self.shape();
        assert_eq!(r * c, rows * cols, "reshape size");
        self.gather(rows, cols, Arc::new((0..r * c).collect()))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value().as_ref() + rhs.value().as_ref();
        self.binary(rhs, v, Op::Add(self.id, rhs.id))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value().as_ref() - rhs.value().as_ref();
        self.binary(rhs, v, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value().as_ref() * rhs.value().as_ref();
        self.binary(rhs, v, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
