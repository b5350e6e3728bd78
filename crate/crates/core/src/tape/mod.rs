//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Every tensor on a [`Tape`] is a batch-first, row-major matrix of shape
//! `[rows, cols]`. The leading dimension is the batch (one row per robot);
//! parameters that are shared across the batch have `rows == 1` and are
//! broadcast by the elementwise operations. 3×3 matrices are stored
//! flattened as 9 columns (row-major), which is what [`Tape::bmm3`] and
//! [`Tape::bmv3`] expect.
//!
//! The primitive set is fixed. There is no data-dependent control flow:
//! conditionals are expressed with [`Tape::where_mask`], whose mask is a
//! constant leaf (see [`Tape::indicator`]) and never receives gradient.
//!
//! Derivative conventions at non-smooth points:
//!
//! * `relu'(0) = 0`, `abs'(0) = 0`
//! * `clamp` passes gradient only strictly inside `(lo, hi)`
//! * `min`/`max` pass gradient to the first operand on ties
//! * `sqrt` and `l2norm` have zero derivative at zero
//! * `where_mask` routes gradient only into the selected branch
//!
//! ```
//! use diffdyn::tape::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.adjoint(x), &[6.0]);
//! ```

mod backward;

use std::fmt;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type usable on a tape.
pub trait Real: Float + FromPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn numel(&self) -> usize {
        self.rows * self.cols
    }

    /// Elementwise broadcast of two shapes; each dimension must match or be 1.
    pub fn broadcast(self, other: Shape) -> Option<Shape> {
        fn dim(a: usize, b: usize) -> Option<usize> {
            match (a, b) {
                _ if a == b => Some(a),
                (1, _) => Some(b),
                (_, 1) => Some(a),
                _ => None,
            }
        }
        Some(Shape::new(dim(self.rows, other.rows)?, dim(self.cols, other.cols)?))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.rows, self.cols)
    }
}

/// Owned dense tensor, used to move data on and off a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, TraceError> {
        if data.len() != shape.numel() {
            return Err(TraceError::new(OpKind::Leaf, &[shape])
                .with_detail(format!("data length {} does not match shape", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self {
            shape: Shape::new(rows, cols),
            data: data.iter().map(|&x| T::lit(x)).collect(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: Shape::new(rows, cols),
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: Shape::SCALAR,
            data: vec![x],
        }
    }

    /// A single row `[1, n]`.
    pub fn row(data: &[T]) -> Self {
        Self {
            shape: Shape::new(1, data.len()),
            data: data.to_vec(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}

/// The fixed primitive set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MatMul,
    Transpose,
    Sum,
    Mean,
    Relu,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Min,
    Max,
    Clamp,
    WhereMask,
    Concat,
    Slice,
    L2Norm,
    Cross3,
    Bmm3,
    Atan2,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("{op}: incompatible shapes {shapes:?}{}", detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
pub struct TraceError {
    pub op: OpKind,
    pub shapes: Vec<Shape>,
    pub detail: Option<String>,
}

impl TraceError {
    fn new(op: OpKind, shapes: &[Shape]) -> Self {
        Self {
            op,
            shapes: shapes.to_vec(),
            detail: None,
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// Reduction axis for [`Tape::sum`] and [`Tape::mean`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce everything to `[1, 1]`.
    All,
    /// Reduce each row to a single column: `[r, c] -> [r, 1]`.
    Cols,
    /// Reduce over the batch: `[r, c] -> [1, c]`.
    Rows,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Gt,
    Ge,
    Lt,
    Le,
}

#[derive(Clone, Copy, Debug)]
enum Op<T> {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var, Axis),
    Mean(Var, Axis),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Abs(Var),
    Min(Var, Var),
    Max(Var, Var),
    Clamp(Var, T, T),
    Where(Var, Var, Var),
    /// Inputs stored in `Tape::extra[start..start + len]`.
    Concat {
        start: u32,
        len: u32,
    },
    Slice {
        x: Var,
        start: u32,
    },
    L2Norm(Var),
    Cross3(Var, Var),
    Bmm3 {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Bmv3 {
        a: Var,
        v: Var,
        ta: bool,
    },
    Atan2(Var, Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Const => OpKind::Const,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Neg(..) => OpKind::Neg,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Relu(..) => OpKind::Relu,
            Op::Sin(..) => OpKind::Sin,
            Op::Cos(..) => OpKind::Cos,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Abs(..) => OpKind::Abs,
            Op::Min(..) => OpKind::Min,
            Op::Max(..) => OpKind::Max,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Where(..) => OpKind::WhereMask,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::L2Norm(..) => OpKind::L2Norm,
            Op::Cross3(..) => OpKind::Cross3,
            Op::Bmm3 { .. } | Op::Bmv3 { .. } => OpKind::Bmm3,
            Op::Atan2(..) => OpKind::Atan2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Shape,
    offset: usize,
    /// True when some leaf upstream of this node can receive gradient.
    grad: bool,
}

/// Append-only computation record.
///
/// Values of all nodes live in one arena; [`Tape::clear`] keeps the
/// allocation so a tape can be reused step after step.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    values: Vec<T>,
    adjoints: Vec<T>,
    reached: Vec<bool>,
    extra: Vec<Var>,
}

type Res = Result<Var, TraceError>;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            adjoints: Vec::new(),
            reached: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn with_capacity(nodes: usize, values: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(nodes),
            values: Vec::with_capacity(values),
            adjoints: Vec::new(),
            reached: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.values.clear();
        self.adjoints.clear();
        self.reached.clear();
        self.extra.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.index()].shape
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.index()].op.kind()
    }

    pub fn value(&self, v: Var) -> &[T] {
        let n = &self.nodes[v.index()];
        &self.values[n.offset..n.offset + n.shape.numel()]
    }

    /// First element of a node's value, as `f64`.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[0].to_f64().unwrap_or(f64::NAN)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor {
            shape: self.shape(v),
            data: self.value(v).to_vec(),
        }
    }

    /// Accumulated adjoint of a node after [`Tape::backward`]; zeros if the
    /// node was not reached.
    pub fn adjoint(&self, v: Var) -> &[T] {
        let n = &self.nodes[v.index()];
        if self.adjoints.len() < n.offset + n.shape.numel() {
            return &[];
        }
        &self.adjoints[n.offset..n.offset + n.shape.numel()]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].grad
    }

    fn push(&mut self, op: Op<T>, shape: Shape, grad: bool) -> (Var, usize) {
        let offset = self.values.len();
        self.values.resize(offset + shape.numel(), T::zero());
        let id = Var(u32::try_from(self.nodes.len()).expect("tape overflow"));
        self.nodes.push(Node {
            op,
            shape,
            offset,
            grad,
        });
        (id, offset)
    }

    fn node(&self, v: Var) -> Node<T> {
        self.nodes[v.index()]
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let (id, off) = self.push(Op::Leaf, t.shape, true);
        self.values[off..].copy_from_slice(&t.data);
        id
    }

    pub fn leaf_slice(&mut self, rows: usize, cols: usize, data: &[T]) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf data length");
        let (id, off) = self.push(Op::Leaf, Shape::new(rows, cols), true);
        self.values[off..].copy_from_slice(data);
        id
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let (id, off) = self.push(Op::Const, t.shape, false);
        self.values[off..].copy_from_slice(&t.data);
        id
    }

    pub fn constant_f64(&mut self, rows: usize, cols: usize, data: &[f64]) -> Var {
        assert_eq!(data.len(), rows * cols, "constant data length");
        let (id, off) = self.push(Op::Const, Shape::new(rows, cols), false);
        for (dst, &src) in self.values[off..].iter_mut().zip(data) {
            *dst = T::lit(src);
        }
        id
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant_f64(1, 1, &[x])
    }

    pub fn full(&mut self, rows: usize, cols: usize, x: f64) -> Var {
        let (id, off) = self.push(Op::Const, Shape::new(rows, cols), false);
        self.values[off..].fill(T::lit(x));
        id
    }

    /// Constant 0/1 mask comparing each element of `x` with `threshold`.
    /// The comparison is evaluated once at record time and is never
    /// differentiated.
    pub fn indicator(&mut self, x: Var, cmp: Cmp, threshold: f64) -> Var {
        let n = self.node(x);
        let th = T::lit(threshold);
        let (id, off) = self.push(Op::Const, n.shape, false);
        for i in 0..n.shape.numel() {
            let a = self.values[n.offset + i];
            let hit = match cmp {
                Cmp::Gt => a > th,
                Cmp::Ge => a >= th,
                Cmp::Lt => a < th,
                Cmp::Le => a <= th,
            };
            self.values[off + i] = if hit { T::one() } else { T::zero() };
        }
        id
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Res {
        let (na, nb) = (self.node(a), self.node(b));
        let shape = na
            .shape
            .broadcast(nb.shape)
            .ok_or_else(|| TraceError::new(op.kind(), &[na.shape, nb.shape]))?;
        let (id, off) = self.push(op, shape, na.grad || nb.grad);
        let (inp, out) = self.values.split_at_mut(off);
        if na.shape == shape && nb.shape == shape {
            let xa = &inp[na.offset..na.offset + shape.numel()];
            let xb = &inp[nb.offset..nb.offset + shape.numel()];
            for ((o, &x), &y) in out.iter_mut().zip(xa).zip(xb) {
                *o = f(x, y);
            }
        } else {
            let mut k = 0;
            for r in 0..shape.rows {
                for c in 0..shape.cols {
                    let x = inp[na.offset + bidx(na.shape, r, c)];
                    let y = inp[nb.offset + bidx(nb.shape, r, c)];
                    out[k] = f(x, y);
                    k += 1;
                }
            }
        }
        Ok(id)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let n = self.node(x);
        let (id, off) = self.push(op, n.shape, n.grad);
        let (inp, out) = self.values.split_at_mut(off);
        for (o, &v) in out.iter_mut().zip(&inp[n.offset..n.offset + n.shape.numel()]) {
            *o = f(v);
        }
        id
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Res {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Res {
        self.binary(a, b, Op::Min(a, b), |x, y| if y < x { y } else { x })
    }

    pub fn max(&mut self, a: Var, b: Var) -> Res {
        self.binary(a, b, Op::Max(a, b), |x, y| if y > x { y } else { x })
    }

    /// Four-quadrant arctangent of `y / x`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Res {
        self.binary(y, x, Op::Atan2(y, x), |a, b| a.atan2(b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), |v| v.sin())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), |v| v.cos())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Res {
        if lo > hi {
            return Err(TraceError::new(OpKind::Clamp, &[self.shape(x)]).with_detail(format!("lo {lo} > hi {hi}")));
        }
        let (l, h) = (T::lit(lo), T::lit(hi));
        Ok(self.unary(x, Op::Clamp(x, l, h), |v| {
            if v < l {
                l
            } else if v > h {
                h
            } else {
                v
            }
        }))
    }

    /// Elementwise select: `mask != 0 ? a : b`. All three broadcast.
    pub fn where_mask(&mut self, mask: Var, a: Var, b: Var) -> Res {
        let (nm, na, nb) = (self.node(mask), self.node(a), self.node(b));
        let err = || TraceError::new(OpKind::WhereMask, &[nm.shape, na.shape, nb.shape]);
        let shape = na
            .shape
            .broadcast(nb.shape)
            .and_then(|s| s.broadcast(nm.shape))
            .ok_or_else(err)?;
        let (id, off) = self.push(Op::Where(mask, a, b), shape, na.grad || nb.grad);
        let (inp, out) = self.values.split_at_mut(off);
        let mut k = 0;
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                let m = inp[nm.offset + bidx(nm.shape, r, c)];
                out[k] = if m != T::zero() {
                    inp[na.offset + bidx(na.shape, r, c)]
                } else {
                    inp[nb.offset + bidx(nb.shape, r, c)]
                };
                k += 1;
            }
        }
        Ok(id)
    }

    /// Plain matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.cols != nb.shape.rows {
            return Err(TraceError::new(OpKind::MatMul, &[na.shape, nb.shape]));
        }
        let (m, k, n) = (na.shape.rows, na.shape.cols, nb.shape.cols);
        let (id, off) = self.push(Op::MatMul(a, b), Shape::new(m, n), na.grad || nb.grad);
        let (inp, out) = self.values.split_at_mut(off);
        let xa = &inp[na.offset..na.offset + m * k];
        let xb = &inp[nb.offset..nb.offset + k * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = xa[i * k + p];
                let brow = &xb[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + s * bv;
                }
            }
        }
        Ok(id)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (r, c) = (n.shape.rows, n.shape.cols);
        let (id, off) = self.push(Op::Transpose(x), Shape::new(c, r), n.grad);
        let (inp, out) = self.values.split_at_mut(off);
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = inp[n.offset + i * c + j];
            }
        }
        id
    }

    fn reduce(&mut self, x: Var, axis: Axis, mean: bool) -> Var {
        let n = self.node(x);
        let (r, c) = (n.shape.rows, n.shape.cols);
        let shape = match axis {
            Axis::All => Shape::SCALAR,
            Axis::Cols => Shape::new(r, 1),
            Axis::Rows => Shape::new(1, c),
        };
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        let (id, off) = self.push(op, shape, n.grad);
        let (inp, out) = self.values.split_at_mut(off);
        let xs = &inp[n.offset..n.offset + r * c];
        match axis {
            Axis::All => {
                let mut s = T::zero();
                for &v in xs {
                    s = s + v;
                }
                out[0] = s;
            }
            Axis::Cols => {
                for i in 0..r {
                    let mut s = T::zero();
                    for &v in &xs[i * c..(i + 1) * c] {
                        s = s + v;
                    }
                    out[i] = s;
                }
            }
            Axis::Rows => {
                for i in 0..r {
                    for j in 0..c {
                        out[j] = out[j] + xs[i * c + j];
                    }
                }
            }
        }
        if mean {
            let count = T::from_usize(r * c / shape.numel()).unwrap();
            for o in out.iter_mut() {
                *o = *o / count;
            }
        }
        id
    }

    pub fn sum(&mut self, x: Var, axis: Axis) -> Var {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Var {
        self.reduce(x, axis, true)
    }

    /// Column-wise concatenation; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Res {
        let first = parts
            .first()
            .map(|&p| self.shape(p))
            .ok_or_else(|| TraceError::new(OpKind::Concat, &[]).with_detail("no inputs"))?;
        let shapes: Vec<Shape> = parts.iter().map(|&p| self.shape(p)).collect();
        if shapes.iter().any(|s| s.rows != first.rows) {
            return Err(TraceError::new(OpKind::Concat, &shapes));
        }
        let cols: usize = shapes.iter().map(|s| s.cols).sum();
        let grad = parts.iter().any(|&p| self.nodes[p.index()].grad);
        let start = self.extra.len() as u32;
        self.extra.extend_from_slice(parts);
        let op = Op::Concat {
            start,
            len: parts.len() as u32,
        };
        let (id, off) = self.push(op, Shape::new(first.rows, cols), grad);
        let mut col0 = 0;
        for &p in parts {
            let np = self.nodes[p.index()];
            let pc = np.shape.cols;
            for i in 0..first.rows {
                let src = np.offset + i * pc;
                let dst = off + i * cols + col0;
                self.values.copy_within(src..src + pc, dst);
            }
            col0 += pc;
        }
        Ok(id)
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Res {
        let n = self.node(x);
        if start + len > n.shape.cols || len == 0 {
            return Err(
                TraceError::new(OpKind::Slice, &[n.shape]).with_detail(format!("columns {start}..{}", start + len))
            );
        }
        let rows = n.shape.rows;
        let op = Op::Slice { x, start: start as u32 };
        let (id, off) = self.push(op, Shape::new(rows, len), n.grad);
        for i in 0..rows {
            let src = n.offset + i * n.shape.cols + start;
            self.values.copy_within(src..src + len, off + i * len);
        }
        Ok(id)
    }

    /// Single column `j` as `[rows, 1]`.
    pub fn col(&mut self, x: Var, j: usize) -> Res {
        self.slice(x, j, 1)
    }

    /// Euclidean norm of each row: `[r, c] -> [r, 1]`.
    pub fn l2norm(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (r, c) = (n.shape.rows, n.shape.cols);
        let (id, off) = self.push(Op::L2Norm(x), Shape::new(r, 1), n.grad);
        let (inp, out) = self.values.split_at_mut(off);
        for i in 0..r {
            let mut s = T::zero();
            for &v in &inp[n.offset + i * c..n.offset + (i + 1) * c] {
                s = s + v * v;
            }
            out[i] = s.sqrt();
        }
        id
    }

    /// Row-wise cross product of `[r, 3]` vectors (rows broadcast).
    pub fn cross3(&mut self, a: Var, b: Var) -> Res {
        let (na, nb) = (self.node(a), self.node(b));
        let rows = batch_rows(na.shape.rows, nb.shape.rows);
        if na.shape.cols != 3 || nb.shape.cols != 3 || rows.is_none() {
            return Err(TraceError::new(OpKind::Cross3, &[na.shape, nb.shape]));
        }
        let rows = rows.unwrap();
        let (id, off) = self.push(Op::Cross3(a, b), Shape::new(rows, 3), na.grad || nb.grad);
        let (inp, out) = self.values.split_at_mut(off);
        for i in 0..rows {
            let x = &inp[na.offset + ridx(na.shape, i, 3)..][..3];
            let y = &inp[nb.offset + ridx(nb.shape, i, 3)..][..3];
            let o = &mut out[i * 3..i * 3 + 3];
            o.copy_from_slice(&cross(x, y));
        }
        Ok(id)
    }

    /// Batched 3×3 matrix product on `[r, 9]` row-major matrices, with
    /// optional transposition of either operand. Rows broadcast.
    pub fn bmm3(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Res {
        let (na, nb) = (self.node(a), self.node(b));
        let rows = batch_rows(na.shape.rows, nb.shape.rows);
        if na.shape.cols != 9 || nb.shape.cols != 9 || rows.is_none() {
            return Err(TraceError::new(OpKind::Bmm3, &[na.shape, nb.shape]));
        }
        let rows = rows.unwrap();
        let op = Op::Bmm3 { a, b, ta, tb };
        let (id, off) = self.push(op, Shape::new(rows, 9), na.grad || nb.grad);
        let (inp, out) = self.values.split_at_mut(off);
        for i in 0..rows {
            let x = &inp[na.offset + ridx(na.shape, i, 9)..][..9];
            let y = &inp[nb.offset + ridx(nb.shape, i, 9)..][..9];
            mat3_mul(x, ta, y, tb, &mut out[i * 9..i * 9 + 9]);
        }
        Ok(id)
    }

    /// Batched 3×3 matrix times vector: `[r, 9] x [r, 3] -> [r, 3]`.
    pub fn bmv3(&mut self, a: Var, v: Var, ta: bool) -> Res {
        let (na, nv) = (self.node(a), self.node(v));
        let rows = batch_rows(na.shape.rows, nv.shape.rows);
        if na.shape.cols != 9 || nv.shape.cols != 3 || rows.is_none() {
            return Err(TraceError::new(OpKind::Bmm3, &[na.shape, nv.shape]));
        }
        let rows = rows.unwrap();
        let op = Op::Bmv3 { a, v, ta };
        let (id, off) = self.push(op, Shape::new(rows, 3), na.grad || nv.grad);
        let (inp, out) = self.values.split_at_mut(off);
        for i in 0..rows {
            let m = &inp[na.offset + ridx(na.shape, i, 9)..][..9];
            let x = &inp[nv.offset + ridx(nv.shape, i, 3)..][..3];
            let o = &mut out[i * 3..i * 3 + 3];
            for r in 0..3 {
                let mut s = T::zero();
                for c in 0..3 {
                    s = s + m3(m, ta, r, c) * x[c];
                }
                o[r] = s;
            }
        }
        Ok(id)
    }

    // Convenience compositions. These record ordinary primitives.

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Res {
        let k = self.scalar(c);
        self.add(x, k)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Res {
        let k = self.scalar(c);
        self.mul(x, k)
    }

    /// Row-wise dot product `[r, c] . [r, c] -> [r, 1]`.
    pub fn dot(&mut self, a: Var, b: Var) -> Res {
        let p = self.mul(a, b)?;
        Ok(self.sum(p, Axis::Cols))
    }

    pub fn square(&mut self, x: Var) -> Res {
        self.mul(x, x)
    }
}

#[inline]
pub(crate) fn bidx(s: Shape, r: usize, c: usize) -> usize {
    let r = if s.rows == 1 { 0 } else { r };
    let c = if s.cols == 1 { 0 } else { c };
    r * s.cols + c
}

#[inline]
pub(crate) fn ridx(s: Shape, r: usize, width: usize) -> usize {
    if s.rows == 1 {
        0
    } else {
        r * width
    }
}

fn batch_rows(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, _) => Some(b),
        (_, 1) => Some(a),
        _ => None,
    }
}

#[inline]
pub(crate) fn m3<T: Copy>(m: &[T], t: bool, r: usize, c: usize) -> T {
    if t {
        m[c * 3 + r]
    } else {
        m[r * 3 + c]
    }
}

pub(crate) fn mat3_mul<T: Real>(x: &[T], tx: bool, y: &[T], ty: bool, out: &mut [T]) {
    for r in 0..3 {
        for c in 0..3 {
            let mut s = T::zero();
            for k in 0..3 {
                s = s + m3(x, tx, r, k) * m3(y, ty, k, c);
            }
            out[r * 3 + c] = s;
        }
    }
}

#[inline]
pub(crate) fn cross<T: Real>(x: &[T], y: &[T]) -> [T; 3] {
    [
        x[1] * y[2] - x[2] * y[1],
        x[2] * y[0] - x[0] * y[2],
        x[0] * y[1] - x[1] * y[0],
    ]
}

#[cfg(test)]
mod tests;
