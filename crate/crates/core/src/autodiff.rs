//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every node holds a dense row-major block. Batched quantities are
//! `batch × width` blocks where row `i` belongs to collocation point `i`;
//! a [`BatchedScalar`] is simply a `batch × 1` block. Parameters and
//! reductions are ordinary blocks with their own shapes.
//!
//! Two backward passes are provided:
//!
//! * [`Tape::gradients`] is a numeric pass from a `1 × 1` output to any set of
//!   leaves. It is what training uses.
//! * [`Tape::input_derivative`] records the backward pass as new tape nodes,
//!   so the result can itself be differentiated again. Second derivatives are
//!   reverse-over-reverse.
//!
//! Input derivatives are taken with a seed of ones over the batch, which is
//! only valid when no op on the path from the input to the output mixes rows.
//! Every op used by the network forward passes is row-local.

use std::fmt;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use thiserror::Error;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// A `batch × 1` node. Kept as a distinct name so signatures say what they expect.
pub type BatchedScalar = Var;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("division by zero in node {node} at batch index {row}")]
    DivisionByZero { node: usize, row: usize },
    #[error("non-finite value in node {node} at batch index {row}")]
    NonFinite { node: usize, row: usize },
    #[error("gradient output {node} must be a 1x1 reduction, found {rows}x{cols}")]
    NotScalar { node: usize, rows: usize, cols: usize },
    #[error("input derivative output {node} must be a batch column, found {rows}x{cols}")]
    NotColumn { node: usize, rows: usize, cols: usize },
    #[error("derivative order {0} is not supported (only 1 and 2)")]
    UnsupportedOrder(u8),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
}

pub type Result<T, E = AdError> = std::result::Result<T, E>;

/// Request for `∂^order output / ∂ wrt^order` at every batch point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DerivativeRequest {
    pub wrt: Var,
    pub order: u8,
}

impl DerivativeRequest {
    pub fn first(wrt: Var) -> Self {
        Self { wrt, order: 1 }
    }

    pub fn second(wrt: Var) -> Self {
        Self { wrt, order: 2 }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    PowInt(Var, i32),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Exp(Var),
    /// `a * scale + shift`
    ScaleShift(Var, f64, f64),
    /// `op(a) · op(b)` where `op` optionally transposes.
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `x · w + 1 bᵀ` with `b` a `1 × m` row.
    Affine { x: Var, w: Var, b: Var },
    /// `g * (1 - y²)`, the tanh derivative applied to an upstream block.
    TanhGrad { g: Var, y: Var },
    /// `-2 · a · b · y`, the `y`-adjoint of `TanhGrad`.
    TanhCurv { a: Var, b: Var, y: Var },
    /// Row-wise softmax.
    Softmax(Var),
    SumRows(Var),
    BroadcastRows(Var, usize),
    SumCols(Var),
    BroadcastCols(Var, usize),
    SumAll(Var),
    Fill(Var, usize, usize),
    SliceCols { a: Var, start: usize, len: usize },
    PadCols { a: Var, start: usize, total: usize },
    ConcatCols(Vec<Var>),
    /// `a (n×m)` scaled row-wise by the column `s (n×1)`.
    ScaleRows(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ScaleRows(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            TanhGrad { g, y } => vec![*g, *y],
            TanhCurv { a, b, y } => vec![*a, *b, *y],
            Affine { x, w, b } => vec![*x, *w, *b],
            Neg(a) | PowInt(a, _) | Sin(a) | Cos(a) | Tanh(a) | Exp(a) | ScaleShift(a, ..) => {
                vec![*a]
            }
            Softmax(a) | SumRows(a) | BroadcastRows(a, _) | SumCols(a) | BroadcastCols(a, _) => {
                vec![*a]
            }
            SumAll(a) | Fill(a, ..) => vec![*a],
            SliceCols { a, .. } | PadCols { a, .. } => vec![*a],
            ConcatCols(parts) => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Append-only record of batched operations.
///
/// Batches of different sizes (collocation, boundary, initial points) may
/// live on the same tape; each input column carries its own row count.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

fn oriented(a: &Array2<f64>, t: bool) -> ArrayView2<'_, f64> {
    if t {
        a.t()
    } else {
        a.view()
    }
}

fn sum_rows(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn sum_cols(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(1)).insert_axis(Axis(1))
}

fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total: f64 = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// `tanh` through a single `exp`; about 3× cheaper than libm's `tanh`.
fn fast_tanh(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 1e-2 {
        let x2 = x * x;
        return x * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 - x2 * 17.0 / 315.0)));
    }
    let e = (-2.0 * ax).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn scale_rows(a: &Array2<f64>, s: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    Zip::from(out.rows_mut())
        .and(s.column(0))
        .for_each(|mut row, &k| row.mapv_inplace(|v| v * k));
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    /// Batched values of a `batch × 1` node as a slice.
    pub fn column(&self, v: Var) -> Vec<f64> {
        self.value(v).column(0).to_vec()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(self.value(v))
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        for input in op.inputs() {
            debug_assert!(input.0 < self.nodes.len());
        }
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (input coordinate, parameter block or constant).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Records a `batch × 1` leaf from per-point values.
    pub fn input(&mut self, values: &[f64]) -> Var {
        assert!(!values.is_empty(), "batch must be non-empty");
        let arr = Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape");
        self.leaf(arr)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, fill: f64) -> Var {
        self.leaf(Array2::from_elem((rows, cols), fill))
    }

    /// Overwrites a leaf value. Call [`Tape::reevaluate`] afterwards.
    pub fn set_leaf(&mut self, v: Var, value: Array2<f64>) {
        let node = &mut self.nodes[v.0];
        assert!(matches!(node.op, Op::Leaf), "only leaves can be reassigned");
        assert_eq!(node.value.dim(), value.dim(), "leaf shape is fixed");
        node.value = value;
    }

    fn compute(&self, op: &Op, id: usize) -> Result<Array2<f64>> {
        use Op::*;
        let val = |v: &Var| &self.nodes[v.0].value;
        let same = |op: &'static str, a: &Var, b: &Var| -> Result<()> {
            if dims(val(a)) != dims(val(b)) {
                return Err(AdError::Shape {
                    op,
                    left: dims(val(a)),
                    right: dims(val(b)),
                });
            }
            Ok(())
        };
        let out = match op {
            Leaf => unreachable!("leaves carry their own value"),
            Add(a, b) => {
                same("add", a, b)?;
                val(a) + val(b)
            }
            Sub(a, b) => {
                same("sub", a, b)?;
                val(a) - val(b)
            }
            Mul(a, b) => {
                same("mul", a, b)?;
                val(a) * val(b)
            }
            Div(a, b) => {
                same("div", a, b)?;
                if let Some(pos) = val(b).iter().position(|&d| d == 0.0) {
                    let cols = val(b).ncols();
                    return Err(AdError::DivisionByZero {
                        node: id,
                        row: pos / cols,
                    });
                }
                val(a) / val(b)
            }
            Neg(a) => val(a).mapv(|v| -v),
            PowInt(a, k) => {
                let k = *k;
                val(a).mapv(|v| v.powi(k))
            }
            Sin(a) => val(a).mapv(f64::sin),
            Cos(a) => val(a).mapv(f64::cos),
            Tanh(a) => val(a).mapv(fast_tanh),
            Exp(a) => val(a).mapv(f64::exp),
            ScaleShift(a, k, c) => {
                let (k, c) = (*k, *c);
                val(a).mapv(|v| v * k + c)
            }
            MatMul { a, b, ta, tb } => {
                let lhs = oriented(val(a), *ta);
                let rhs = oriented(val(b), *tb);
                if lhs.ncols() != rhs.nrows() {
                    return Err(AdError::Shape {
                        op: "matmul",
                        left: lhs.dim(),
                        right: rhs.dim(),
                    });
                }
                lhs.dot(&rhs)
            }
            Affine { x, w, b } => {
                let (xv, wv, bv) = (val(x), val(w), val(b));
                if xv.ncols() != wv.nrows() || bv.dim() != (1, wv.ncols()) {
                    return Err(AdError::Shape {
                        op: "affine",
                        left: xv.dim(),
                        right: wv.dim(),
                    });
                }
                let mut out = xv.dot(wv);
                out += bv;
                out
            }
            TanhGrad { g, y } => {
                same("tanh_grad", g, y)?;
                let mut out = val(g).clone();
                Zip::from(&mut out)
                    .and(val(y))
                    .for_each(|o, &yv| *o *= 1.0 - yv * yv);
                out
            }
            TanhCurv { a, b, y } => {
                same("tanh_curv", a, b)?;
                same("tanh_curv", a, y)?;
                let mut out = val(a).clone();
                Zip::from(&mut out)
                    .and(val(b))
                    .and(val(y))
                    .for_each(|o, &bv, &yv| *o *= -2.0 * bv * yv);
                out
            }
            Softmax(a) => softmax_rows(val(a)),
            SumRows(a) => sum_rows(val(a)),
            BroadcastRows(a, n) => val(a)
                .broadcast((*n, val(a).ncols()))
                .expect("row broadcast")
                .to_owned(),
            SumCols(a) => sum_cols(val(a)),
            BroadcastCols(a, m) => val(a)
                .broadcast((val(a).nrows(), *m))
                .expect("column broadcast")
                .to_owned(),
            SumAll(a) => Array2::from_elem((1, 1), val(a).sum()),
            Fill(a, n, m) => Array2::from_elem((*n, *m), val(a)[[0, 0]]),
            SliceCols { a, start, len } => val(a).slice(s![.., *start..*start + *len]).to_owned(),
            PadCols { a, start, total } => {
                let av = val(a);
                let mut out = Array2::zeros((av.nrows(), *total));
                out.slice_mut(s![.., *start..*start + av.ncols()]).assign(av);
                out
            }
            ConcatCols(parts) => {
                let views: Vec<_> = parts.iter().map(|p| val(p).view()).collect();
                ndarray::concatenate(Axis(1), &views).map_err(|_| AdError::Shape {
                    op: "concat",
                    left: dims(val(&parts[0])),
                    right: (0, 0),
                })?
            }
            ScaleRows(a, sc) => {
                if val(sc).dim() != (val(a).nrows(), 1) {
                    return Err(AdError::Shape {
                        op: "scale_rows",
                        left: dims(val(a)),
                        right: dims(val(sc)),
                    });
                }
                scale_rows(val(a), val(sc))
            }
        };
        Ok(out)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op, self.nodes.len())?;
        Ok(self.push(op, value))
    }

    fn record_infallible(&mut self, op: Op) -> Var {
        self.record(op).expect("operands were validated at recording")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.record_infallible(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.record_infallible(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.record_infallible(Op::Mul(a, b))
    }

    /// Elementwise division; a zero anywhere in the denominator is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Neg(a))
    }

    pub fn pow_int(&mut self, a: Var, k: i32) -> Var {
        self.record_infallible(Op::PowInt(a, k))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Cos(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Exp(a))
    }

    /// `a * scale + shift`.
    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.record_infallible(Op::ScaleShift(a, scale, shift))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.scale_shift(a, k, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul {
            a,
            b,
            ta: false,
            tb: false,
        })
    }

    /// Batched affine map `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(Op::Affine { x, w, b })
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.record_infallible(Op::Softmax(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.record_infallible(Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let total = self.sum_all(a);
        self.scale(total, 1.0 / (r * c) as f64)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.record_infallible(Op::SumCols(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape(a).1, "column slice out of range");
        self.record_infallible(Op::SliceCols { a, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat needs at least one block");
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    /// Scales each row of `a` by the matching entry of the column `s`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        self.record(Op::ScaleRows(a, s))
    }

    /// Squared-sum reduction to a `1 × 1` node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    /// Recomputes every derived node from the current leaf values.
    pub fn reevaluate(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let value = self.compute(&op, id)?;
            self.nodes[id].value = value;
        }
        Ok(())
    }

    /// Errors on the first NaN or infinity in `v`.
    pub fn check_finite(&self, v: Var) -> Result<()> {
        let value = self.value(v);
        if let Some(pos) = value.iter().position(|x| !x.is_finite()) {
            return Err(AdError::NonFinite {
                node: v.0,
                row: pos / value.ncols().max(1),
            });
        }
        Ok(())
    }

    /// Marks nodes up to `upto` that depend on any of `wrt`.
    fn dependents(&self, upto: usize, wrt: &[Var]) -> Vec<bool> {
        let mut dep = vec![false; upto + 1];
        for w in wrt {
            if w.0 <= upto {
                dep[w.0] = true;
            }
        }
        for id in 0..=upto {
            if !dep[id] {
                dep[id] = self.nodes[id].op.inputs().iter().any(|i| dep[i.0]);
            }
        }
        dep
    }

    /// Numeric gradients of the `1 × 1` node `output` with respect to `wrt`.
    ///
    /// Leaves that do not influence `output` get an exact zero block.
    pub fn gradients(&self, output: Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>> {
        let (rows, cols) = self.shape(output);
        if (rows, cols) != (1, 1) {
            return Err(AdError::NotScalar {
                node: output.0,
                rows,
                cols,
            });
        }
        let dep = self.dependents(output.0, wrt);
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Array2::ones((1, 1)));
        let mut wanted = vec![false; output.0 + 1];
        for w in wrt {
            if w.0 <= output.0 {
                wanted[w.0] = true;
            }
        }
        let mut keep: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];

        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !dep[id] {
                continue;
            }
            let op = &self.nodes[id].op;
            if !matches!(op, Op::Leaf) {
                for (input, grad) in self.numeric_vjp(id, &g, &dep) {
                    match &mut adj[input.0] {
                        Some(acc) => *acc += &grad,
                        slot @ None => *slot = Some(grad),
                    }
                }
            }
            if wanted[id] {
                keep[id] = Some(g);
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                keep.get(w.0)
                    .and_then(|k| k.clone())
                    .unwrap_or_else(|| Array2::zeros(self.value(*w).dim()))
            })
            .collect())
    }

    fn numeric_vjp(&self, id: usize, g: &Array2<f64>, dep: &[bool]) -> Vec<(Var, Array2<f64>)> {
        use Op::*;
        let val = |v: &Var| &self.nodes[v.0].value;
        let y = &self.nodes[id].value;
        let need = |v: &Var| dep[v.0];
        let mut out = Vec::with_capacity(2);
        match &self.nodes[id].op {
            Leaf => {}
            Add(a, b) => {
                if need(a) {
                    out.push((*a, g.clone()));
                }
                if need(b) {
                    out.push((*b, g.clone()));
                }
            }
            Sub(a, b) => {
                if need(a) {
                    out.push((*a, g.clone()));
                }
                if need(b) {
                    out.push((*b, g.mapv(|v| -v)));
                }
            }
            Mul(a, b) => {
                if need(a) {
                    out.push((*a, g * val(b)));
                }
                if need(b) {
                    out.push((*b, g * val(a)));
                }
            }
            Div(a, b) => {
                if need(a) {
                    out.push((*a, g / val(b)));
                }
                if need(b) {
                    let mut d = g * y;
                    d /= val(b);
                    d.mapv_inplace(|v| -v);
                    out.push((*b, d));
                }
            }
            Neg(a) => out.push((*a, g.mapv(|v| -v))),
            PowInt(a, k) => {
                let k = *k;
                let mut d = val(a).mapv(|v| k as f64 * v.powi(k - 1));
                d *= g;
                out.push((*a, d));
            }
            Sin(a) => {
                let mut d = val(a).mapv(f64::cos);
                d *= g;
                out.push((*a, d));
            }
            Cos(a) => {
                let mut d = val(a).mapv(|v| -v.sin());
                d *= g;
                out.push((*a, d));
            }
            Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                out.push((*a, d));
            }
            Exp(a) => out.push((*a, g * y)),
            ScaleShift(a, k, _) => {
                let k = *k;
                out.push((*a, g.mapv(|v| v * k)));
            }
            MatMul { a, b, ta, tb } => {
                let av = oriented(val(a), *ta);
                let bv = oriented(val(b), *tb);
                if need(a) {
                    // d op(A) = g · op(B)ᵀ
                    let d = g.dot(&bv.t());
                    out.push((*a, if *ta { d.reversed_axes().as_standard_layout().to_owned() } else { d }));
                }
                if need(b) {
                    // d op(B) = op(A)ᵀ · g
                    let d = av.t().dot(g);
                    out.push((*b, if *tb { d.reversed_axes().as_standard_layout().to_owned() } else { d }));
                }
            }
            Affine { x, w, b } => {
                if need(x) {
                    out.push((*x, g.dot(&val(w).t())));
                }
                if need(w) {
                    out.push((*w, val(x).t().dot(g)));
                }
                if need(b) {
                    out.push((*b, sum_rows(g)));
                }
            }
            TanhGrad { g: gi, y: yv } => {
                if need(gi) {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(val(yv))
                        .for_each(|d, &t| *d *= 1.0 - t * t);
                    out.push((*gi, d));
                }
                if need(yv) {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(val(gi))
                        .and(val(yv))
                        .for_each(|d, &u, &t| *d *= -2.0 * u * t);
                    out.push((*yv, d));
                }
            }
            TanhCurv { a, b, y: yv } => {
                for (target, p, q) in [(a, b, yv), (b, a, yv), (yv, a, b)] {
                    if need(target) {
                        let mut d = g.clone();
                        Zip::from(&mut d)
                            .and(val(p))
                            .and(val(q))
                            .for_each(|d, &pv, &qv| *d *= -2.0 * pv * qv);
                        out.push((*target, d));
                    }
                }
            }
            Softmax(a) => {
                let gy = g * y;
                let dot = sum_cols(&gy);
                let mut d = g - &dot;
                d *= y;
                out.push((*a, d));
            }
            SumRows(a) => {
                let n = val(a).nrows();
                out.push((*a, g.broadcast((n, g.ncols())).unwrap().to_owned()));
            }
            BroadcastRows(a, _) => out.push((*a, sum_rows(g))),
            SumCols(a) => {
                let m = val(a).ncols();
                out.push((*a, g.broadcast((g.nrows(), m)).unwrap().to_owned()));
            }
            BroadcastCols(a, _) => out.push((*a, sum_cols(g))),
            SumAll(a) => out.push((*a, Array2::from_elem(val(a).dim(), g[[0, 0]]))),
            Fill(a, ..) => out.push((*a, Array2::from_elem((1, 1), g.sum()))),
            SliceCols { a, start, len } => {
                let av = val(a);
                let mut d = Array2::zeros(av.dim());
                d.slice_mut(s![.., *start..*start + *len]).assign(g);
                out.push((*a, d));
            }
            PadCols { a, start, .. } => {
                let len = val(a).ncols();
                out.push((*a, g.slice(s![.., *start..*start + len]).to_owned()));
            }
            ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(p).ncols();
                    if need(p) {
                        out.push((*p, g.slice(s![.., offset..offset + w]).to_owned()));
                    }
                    offset += w;
                }
            }
            ScaleRows(a, sc) => {
                if need(a) {
                    out.push((*a, scale_rows(g, val(sc))));
                }
                if need(sc) {
                    out.push((*sc, sum_cols(&(g * val(a)))));
                }
            }
        }
        out
    }

    /// Records the vector-Jacobian product of node `id` as new tape nodes.
    fn symbolic_vjp(&mut self, id: usize, g: Var, dep: &[bool]) -> Vec<(Var, Var)> {
        use Op::*;
        let node_var = Var(id);
        let op = self.nodes[id].op.clone();
        let need = |v: &Var| v.0 < dep.len() && dep[v.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Leaf => {}
            Add(a, b) => {
                if need(&a) {
                    out.push((a, g));
                }
                if need(&b) {
                    out.push((b, g));
                }
            }
            Sub(a, b) => {
                if need(&a) {
                    out.push((a, g));
                }
                if need(&b) {
                    let d = self.neg(g);
                    out.push((b, d));
                }
            }
            Mul(a, b) => {
                if need(&a) {
                    let d = self.mul(g, b);
                    out.push((a, d));
                }
                if need(&b) {
                    let d = self.mul(g, a);
                    out.push((b, d));
                }
            }
            Div(a, b) => {
                // b was checked nonzero when this node was recorded.
                if need(&a) {
                    let d = self.record_infallible(Div(g, b));
                    out.push((a, d));
                }
                if need(&b) {
                    let gy = self.mul(g, node_var);
                    let q = self.record_infallible(Div(gy, b));
                    let d = self.neg(q);
                    out.push((b, d));
                }
            }
            Neg(a) => {
                let d = self.neg(g);
                out.push((a, d));
            }
            PowInt(a, k) => {
                let p = self.pow_int(a, k - 1);
                let p = self.scale(p, k as f64);
                let d = self.mul(g, p);
                out.push((a, d));
            }
            Sin(a) => {
                let c = self.cos(a);
                let d = self.mul(g, c);
                out.push((a, d));
            }
            Cos(a) => {
                let sn = self.sin(a);
                let m = self.mul(g, sn);
                let d = self.neg(m);
                out.push((a, d));
            }
            Tanh(a) => {
                let d = self.record_infallible(TanhGrad { g, y: node_var });
                out.push((a, d));
            }
            Exp(a) => {
                let d = self.mul(g, node_var);
                out.push((a, d));
            }
            ScaleShift(a, k, _) => {
                let d = self.scale(g, k);
                out.push((a, d));
            }
            MatMul { a, b, ta, tb } => {
                if need(&a) {
                    let d = if ta {
                        self.record_infallible(MatMul {
                            a: b,
                            b: g,
                            ta: tb,
                            tb: true,
                        })
                    } else {
                        self.record_infallible(MatMul {
                            a: g,
                            b,
                            ta: false,
                            tb: !tb,
                        })
                    };
                    out.push((a, d));
                }
                if need(&b) {
                    let d = if tb {
                        self.record_infallible(MatMul {
                            a: g,
                            b: a,
                            ta: true,
                            tb: ta,
                        })
                    } else {
                        self.record_infallible(MatMul {
                            a,
                            b: g,
                            ta: !ta,
                            tb: false,
                        })
                    };
                    out.push((b, d));
                }
            }
            Affine { x, w, b } => {
                if need(&x) {
                    let d = self.record_infallible(MatMul {
                        a: g,
                        b: w,
                        ta: false,
                        tb: true,
                    });
                    out.push((x, d));
                }
                if need(&w) {
                    let d = self.record_infallible(MatMul {
                        a: x,
                        b: g,
                        ta: true,
                        tb: false,
                    });
                    out.push((w, d));
                }
                if need(&b) {
                    let d = self.record_infallible(SumRows(g));
                    out.push((b, d));
                }
            }
            TanhGrad { g: gi, y } => {
                if need(&gi) {
                    let d = self.record_infallible(TanhGrad { g, y });
                    out.push((gi, d));
                }
                if need(&y) {
                    let d = self.record_infallible(TanhCurv { a: g, b: gi, y });
                    out.push((y, d));
                }
            }
            TanhCurv { a, b, y } => {
                for (target, p, q) in [(a, b, y), (b, a, y), (y, a, b)] {
                    if need(&target) {
                        let d = self.record_infallible(TanhCurv { a: g, b: p, y: q });
                        out.push((target, d));
                    }
                }
            }
            Softmax(a) => {
                let m = self.shape(a).1;
                let gy = self.mul(g, node_var);
                let dot = self.sum_cols(gy);
                let dotb = self.record_infallible(BroadcastCols(dot, m));
                let diff = self.sub(g, dotb);
                let d = self.mul(node_var, diff);
                out.push((a, d));
            }
            SumRows(a) => {
                let n = self.shape(a).0;
                let d = self.record_infallible(BroadcastRows(g, n));
                out.push((a, d));
            }
            BroadcastRows(a, _) => {
                let d = self.record_infallible(SumRows(g));
                out.push((a, d));
            }
            SumCols(a) => {
                let m = self.shape(a).1;
                let d = self.record_infallible(BroadcastCols(g, m));
                out.push((a, d));
            }
            BroadcastCols(a, _) => {
                let d = self.sum_cols(g);
                out.push((a, d));
            }
            SumAll(a) => {
                let (n, m) = self.shape(a);
                let d = self.record_infallible(Fill(g, n, m));
                out.push((a, d));
            }
            Fill(a, ..) => {
                let d = self.sum_all(g);
                out.push((a, d));
            }
            SliceCols { a, start, .. } => {
                let total = self.shape(a).1;
                let d = self.record_infallible(PadCols { a: g, start, total });
                out.push((a, d));
            }
            PadCols { a, start, .. } => {
                let len = self.shape(a).1;
                let d = self.slice_cols(g, start, len);
                out.push((a, d));
            }
            ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(p).1;
                    if need(&p) {
                        let d = self.slice_cols(g, offset, w);
                        out.push((p, d));
                    }
                    offset += w;
                }
            }
            ScaleRows(a, sc) => {
                if need(&a) {
                    let d = self.record_infallible(ScaleRows(g, sc));
                    out.push((a, d));
                }
                if need(&sc) {
                    let ga = self.mul(g, a);
                    let d = self.sum_cols(ga);
                    out.push((sc, d));
                }
            }
        }
        out
    }

    /// Records `∂(seed-weighted output)/∂wrt` for each leaf in `wrt` as new nodes.
    ///
    /// `seed` has the shape of `output`. Leaves not reached get a zero node.
    fn backward_graph(&mut self, output: Var, seed: Var, wrt: &[Var]) -> Vec<Var> {
        let dep = self.dependents(output.0, wrt);
        let mut adj: Vec<Option<Var>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed);
        let mut result: Vec<Option<Var>> = vec![None; wrt.len()];

        for id in (0..=output.0).rev() {
            let Some(g) = adj[id] else { continue };
            if !dep[id] {
                continue;
            }
            for (k, w) in wrt.iter().enumerate() {
                if w.0 == id {
                    result[k] = Some(g);
                }
            }
            for (input, grad) in self.symbolic_vjp(id, g, &dep) {
                adj[input.0] = Some(match adj[input.0] {
                    Some(acc) => self.add(acc, grad),
                    None => grad,
                });
            }
        }

        wrt.iter()
            .zip(result)
            .map(|(w, r)| {
                r.unwrap_or_else(|| {
                    let (n, m) = self.shape(*w);
                    self.constant(n, m, 0.0)
                })
            })
            .collect()
    }

    /// Per-point first derivatives of a batch column with respect to several
    /// input columns in one backward sweep.
    pub fn input_gradients(&mut self, output: BatchedScalar, wrt: &[Var]) -> Result<Vec<BatchedScalar>> {
        let (rows, cols) = self.shape(output);
        if cols != 1 {
            return Err(AdError::NotColumn {
                node: output.0,
                rows,
                cols,
            });
        }
        let seed = self.constant(rows, 1, 1.0);
        Ok(self.backward_graph(output, seed, wrt))
    }

    /// Records the requested per-point derivative as a differentiable node.
    pub fn input_derivative(&mut self, output: BatchedScalar, request: DerivativeRequest) -> Result<BatchedScalar> {
        match request.order {
            1 => Ok(self.input_gradients(output, &[request.wrt])?[0]),
            2 => {
                let first = self.input_gradients(output, &[request.wrt])?[0];
                Ok(self.input_gradients(first, &[request.wrt])?[0])
            }
            other => Err(AdError::UnsupportedOrder(other)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn col(tape: &mut Tape, v: &[f64]) -> Var {
        tape.input(v)
    }

    #[test]
    fn record_examples() {
        let mut tape = Tape::new();
        let x = col(&mut tape, &[3.0]);
        let sq = tape.mul(x, x);
        assert_eq!(tape.scalar(sq), 9.0);

        let z = col(&mut tape, &[0.0]);
        let t = tape.tanh(z);
        assert_eq!(tape.scalar(t), 0.0);

        let h = col(&mut tape, &[0.5]);
        let sn = tape.sin(h);
        assert_abs_diff_eq!(tape.scalar(sn), 0.479_425_538_604_203, epsilon = 1e-12);
    }

    #[test]
    fn division_by_zero_reports_row() {
        let mut tape = Tape::new();
        let a = col(&mut tape, &[1.0, 2.0, 3.0]);
        let b = col(&mut tape, &[1.0, 0.0, 2.0]);
        match tape.div(a, b) {
            Err(AdError::DivisionByZero { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected division error, got {other:?}"),
        }
    }

    #[test]
    fn polynomial_and_tanh_gradients() {
        let mut tape = Tape::new();
        let p = tape.leaf(array![[3.0]]);
        let sq = tape.mul(p, p);
        let g = tape.gradients(sq, &[p]).unwrap();
        assert_eq!(g[0][[0, 0]], 6.0);

        let q = tape.leaf(array![[0.7]]);
        let th = tape.tanh(q);
        let g = tape.gradients(th, &[q]).unwrap();
        assert_abs_diff_eq!(g[0][[0, 0]], 1.0 - 0.7f64.tanh().powi(2), epsilon = 1e-15);
        assert_abs_diff_eq!(g[0][[0, 0]], 0.634_739_589_982_458, epsilon = 1e-12);
    }

    #[test]
    fn untouched_parameter_gets_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(array![[2.0]]);
        let other = tape.leaf(array![[1.0, 2.0]]);
        let out = tape.mul(p, p);
        let g = tape.gradients(out, &[other]).unwrap();
        assert_eq!(g[0], Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn gradient_requires_scalar() {
        let mut tape = Tape::new();
        let x = col(&mut tape, &[1.0, 2.0]);
        let y = tape.mul(x, x);
        assert!(matches!(tape.gradients(y, &[x]), Err(AdError::NotScalar { .. })));
    }

    #[test]
    fn input_derivative_examples() {
        let mut tape = Tape::new();
        let x = col(&mut tape, &[3.0, 3.0]);
        let u = tape.mul(x, x);
        let du = tape.input_derivative(u, DerivativeRequest::first(x)).unwrap();
        assert_eq!(tape.column(du), vec![6.0, 6.0]);

        let mut tape = Tape::new();
        let x = col(&mut tape, &[0.25]);
        let arg = tape.scale(x, 2.0 * std::f64::consts::PI);
        let u = tape.sin(arg);
        let d2 = tape.input_derivative(u, DerivativeRequest::second(x)).unwrap();
        assert_abs_diff_eq!(tape.scalar(d2), -39.478_417_604_357_43, epsilon = 1e-9);

        let mut tape = Tape::new();
        let x = col(&mut tape, &[0.1, 0.2]);
        let t = col(&mut tape, &[0.3, 0.4]);
        let u = tape.scale(t, 1.0);
        let dx = tape.input_derivative(u, DerivativeRequest::first(x)).unwrap();
        assert_eq!(tape.column(dx), vec![0.0, 0.0]);
    }

    #[test]
    fn third_order_rejected() {
        let mut tape = Tape::new();
        let x = col(&mut tape, &[1.0]);
        let u = tape.mul(x, x);
        let req = DerivativeRequest { wrt: x, order: 3 };
        assert_eq!(tape.input_derivative(u, req), Err(AdError::UnsupportedOrder(3)));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradient_matches() {
        let mut tape = Tape::new();
        let logits = tape.leaf(array![[0.3, -1.2, 2.0], [0.0, 0.0, 0.0]]);
        let sm = tape.softmax(logits);
        for row in tape.value(sm).rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-15);
        }
        let weights = tape.leaf(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        let prod = tape.mul(sm, weights);
        let out = tape.sum_all(prod);
        let g = tape.gradients(out, &[logits]).unwrap()[0].clone();

        let eval = |l: &Array2<f64>| -> f64 {
            let y = softmax_rows(l);
            (&y * &array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]).sum()
        };
        let base = tape.value(logits).clone();
        for i in 0..2 {
            for j in 0..3 {
                let h = 1e-6;
                let mut p = base.clone();
                p[[i, j]] += h;
                let mut m = base.clone();
                m[[i, j]] -= h;
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                assert_abs_diff_eq!(g[[i, j]], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn matmul_transpose_gradients_agree_with_finite_differences() {
        let a0 = array![[0.1, -0.4, 0.7], [1.1, 0.2, -0.3]];
        let b0 = array![[0.5, -1.0], [0.3, 0.8], [-0.2, 0.4]];
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_in = if ta { a0.t().to_owned() } else { a0.clone() };
            let b_in = if tb { b0.t().to_owned() } else { b0.clone() };
            let mut tape = Tape::new();
            let a = tape.leaf(a_in.clone());
            let b = tape.leaf(b_in.clone());
            let c = tape.record(Op::MatMul { a, b, ta, tb }).unwrap();
            let c3 = tape.pow_int(c, 3);
            let out = tape.sum_all(c3);
            let grads = tape.gradients(out, &[a, b]).unwrap();

            let eval = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
                oriented(a, ta).dot(&oriented(b, tb)).mapv(|v| v.powi(3)).sum()
            };
            let h = 1e-6;
            for ((i, j), g) in grads[0].indexed_iter() {
                let mut p = a_in.clone();
                p[[i, j]] += h;
                let mut m = a_in.clone();
                m[[i, j]] -= h;
                let fd = (eval(&p, &b_in) - eval(&m, &b_in)) / (2.0 * h);
                assert_abs_diff_eq!(*g, fd, epsilon = 1e-7);
            }
            for ((i, j), g) in grads[1].indexed_iter() {
                let mut p = b_in.clone();
                p[[i, j]] += h;
                let mut m = b_in.clone();
                m[[i, j]] -= h;
                let fd = (eval(&a_in, &p) - eval(&a_in, &m)) / (2.0 * h);
                assert_abs_diff_eq!(*g, fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn reevaluation_is_bit_identical() {
        let mut tape = Tape::new();
        let x = col(&mut tape, &[0.1, -0.5, 0.9]);
        let w = tape.leaf(array![[0.3, -0.7]]);
        let b = tape.leaf(array![[0.05, 0.1]]);
        let h = tape.affine(x, w, b).unwrap();
        let a = tape.tanh(h);
        let e = tape.exp(a);
        let out = tape.sum_all(e);
        let before = tape.value(out).clone();
        tape.reevaluate().unwrap();
        assert_eq!(tape.value(out), &before);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut tape = Tape::new();
        let x = col(&mut tape, &[1.0, 800.0]);
        let e = tape.exp(x);
        assert_eq!(tape.check_finite(e), Err(AdError::NonFinite { node: e.0, row: 1 }));
    }
}
