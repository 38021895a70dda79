use std::fmt;
use std::rc::Rc;

use super::kernels::{self, Lu};
use super::DiffError;

/// Every tensor is a batch of row-major matrices: `[batch, rows, cols]`.
/// Vectors are column matrices and scalars are `[1, 1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { batch: 1, rows: 1, cols: 1 };

    pub const fn new(batch: usize, rows: usize, cols: usize) -> Self {
        Shape { batch, rows, cols }
    }

    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape { batch: 1, rows, cols }
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.rows * self.cols
    }

    pub const fn mat_len(&self) -> usize {
        self.rows * self.cols
    }

    fn broadcast(self, other: Shape) -> Option<Shape> {
        fn dim(a: usize, b: usize) -> Option<usize> {
            if a == b || b == 1 {
                Some(a)
            } else if a == 1 {
                Some(b)
            } else {
                None
            }
        }
        Some(Shape {
            batch: dim(self.batch, other.batch)?,
            rows: dim(self.rows, other.rows)?,
            cols: dim(self.cols, other.cols)?,
        })
    }

    /// Flat index into `self` for output position `(b, i, j)` under broadcasting.
    #[inline]
    fn bidx(&self, b: usize, i: usize, j: usize) -> usize {
        let b = if self.batch == 1 { 0 } else { b };
        let i = if self.rows == 1 { 0 } else { i };
        let j = if self.cols == 1 { 0 } else { j };
        (b * self.rows + i) * self.cols + j
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.batch, self.rows, self.cols)
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Square,
    Exp,
    Log,
    Tanh,
    Softplus,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Binary(BinaryOp, Tensor, Tensor),
    Unary(UnaryOp, Tensor),
    Transpose(Tensor),
    Symmetrize(Tensor),
    Concat(Axis, Rc<[Tensor]>),
    Slice(Axis, Tensor, usize),
    GatherRows(Tensor, Rc<[usize]>),
    Reshape(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    Solve(Tensor, Tensor, Rc<[Lu]>),
    Inverse(Tensor),
    Cholesky(Tensor),
    DiagPart(Tensor),
    DiagEmbed(Tensor),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations. Node ids are assigned in execution order,
/// so a reverse sweep over ids is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

type Result<T> = std::result::Result<T, DiffError>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(value.len(), shape.numel());
        self.nodes.push(Node { value, shape, op, requires_grad });
        Tensor(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Shape, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if values.len() != shape.numel() {
            return Err(DiffError::LengthMismatch { len: values.len(), shape });
        }
        Ok(self.push(values, shape, Op::Leaf, requires_grad))
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: Shape, values: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, values, true)
    }

    pub fn constant(&mut self, shape: Shape, values: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, values, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Tensor {
        self.push(vec![v], Shape::SCALAR, Op::Leaf, false)
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> Shape {
        self.nodes[t.0].shape
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value[0]
    }

    pub fn is_finite(&self, t: Tensor) -> bool {
        self.nodes[t.0].value.iter().all(|v| v.is_finite())
    }

    /// Accumulated gradient, available after [`Graph::backward`] for leaves
    /// that require gradients.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let batch_ok = sa.batch == sb.batch || sa.batch == 1 || sb.batch == 1;
        if sa.cols != sb.rows || !batch_ok {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let out = Shape::new(sa.batch.max(sb.batch), sa.rows, sb.cols);
        let mut v = vec![0.0; out.numel()];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for bi in 0..out.batch {
                let ao = if sa.batch == 1 { 0 } else { bi * sa.mat_len() };
                let bo = if sb.batch == 1 { 0 } else { bi * sb.mat_len() };
                kernels::matmul_acc(
                    &va[ao..ao + sa.mat_len()],
                    &vb[bo..bo + sb.mat_len()],
                    &mut v[bi * out.mat_len()..(bi + 1) * out.mat_len()],
                    sa.rows,
                    sa.cols,
                    sb.cols,
                );
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(v, out, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = sa.broadcast(sb).ok_or(DiffError::ShapeMismatch {
            op: binary_name(op),
            lhs: sa,
            rhs: sb,
        })?;
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let v: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut v = Vec::with_capacity(out.numel());
            for bi in 0..out.batch {
                for i in 0..out.rows {
                    for j in 0..out.cols {
                        v.push(f(va[sa.bidx(bi, i, j)], vb[sb.bidx(bi, i, j)]));
                    }
                }
            }
            v
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(v, out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, a, b)
    }

    /// Elementwise product (with broadcasting over unit dimensions).
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Tensor) -> Tensor {
        let f = |x: f64| match op {
            UnaryOp::Square => x * x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Scale(c) => c * x,
            UnaryOp::AddScalar(c) => x + c,
            UnaryOp::Clamp(lo, hi) => x.clamp(lo, hi),
        };
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let (s, rg) = (self.shape(a), self.requires_grad(a));
        self.push(v, s, Op::Unary(op, a), rg)
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Square, a)
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Log, a)
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn softplus(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        self.unary(UnaryOp::AddScalar(c), a)
    }

    /// Gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Tensor {
        self.unary(UnaryOp::Clamp(lo, hi), a)
    }

    pub fn transpose(&mut self, a: Tensor) -> Tensor {
        let s = self.shape(a);
        let mut v = Vec::with_capacity(s.numel());
        let va = self.value(a);
        for bi in 0..s.batch {
            let m = &va[bi * s.mat_len()..(bi + 1) * s.mat_len()];
            v.extend(kernels::transpose(m, s.rows, s.cols));
        }
        let rg = self.requires_grad(a);
        self.push(v, Shape::new(s.batch, s.cols, s.rows), Op::Transpose(a), rg)
    }

    /// `(X + Xᵀ) / 2` for square matrices.
    pub fn symmetrize(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.shape(a);
        if s.rows != s.cols {
            return Err(DiffError::InvalidShape { op: "symmetrize", shape: s });
        }
        let n = s.rows;
        let va = self.value(a);
        let mut v = vec![0.0; s.numel()];
        for bi in 0..s.batch {
            let o = bi * n * n;
            for i in 0..n {
                for j in 0..n {
                    v[o + i * n + j] = 0.5 * (va[o + i * n + j] + va[o + j * n + i]);
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(v, s, Op::Symmetrize(a), rg))
    }

    pub fn concat(&mut self, axis: Axis, parts: &[Tensor]) -> Result<Tensor> {
        let first = *parts.first().ok_or(DiffError::EmptyInput { op: "concat" })?;
        let s0 = self.shape(first);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = match axis {
                Axis::Rows => s.batch == s0.batch && s.cols == s0.cols,
                Axis::Cols => s.batch == s0.batch && s.rows == s0.rows,
            };
            if !ok {
                return Err(DiffError::ShapeMismatch { op: "concat", lhs: s0, rhs: s });
            }
            total += match axis {
                Axis::Rows => s.rows,
                Axis::Cols => s.cols,
            };
        }
        let out = match axis {
            Axis::Rows => Shape::new(s0.batch, total, s0.cols),
            Axis::Cols => Shape::new(s0.batch, s0.rows, total),
        };
        let mut v = Vec::with_capacity(out.numel());
        for bi in 0..out.batch {
            match axis {
                Axis::Rows => {
                    for &p in parts {
                        let s = self.shape(p);
                        v.extend_from_slice(&self.value(p)[bi * s.mat_len()..(bi + 1) * s.mat_len()]);
                    }
                }
                Axis::Cols => {
                    for i in 0..out.rows {
                        for &p in parts {
                            let s = self.shape(p);
                            let start = (bi * s.rows + i) * s.cols;
                            v.extend_from_slice(&self.value(p)[start..start + s.cols]);
                        }
                    }
                }
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(v, out, Op::Concat(axis, parts.into()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        self.concat(Axis::Rows, parts)
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        self.concat(Axis::Cols, parts)
    }

    pub fn slice(&mut self, axis: Axis, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape(a);
        let extent = match axis {
            Axis::Rows => s.rows,
            Axis::Cols => s.cols,
        };
        if start + len > extent {
            return Err(DiffError::OutOfRange { op: "slice", index: start + len, extent });
        }
        let out = match axis {
            Axis::Rows => Shape::new(s.batch, len, s.cols),
            Axis::Cols => Shape::new(s.batch, s.rows, len),
        };
        let va = self.value(a);
        let mut v = Vec::with_capacity(out.numel());
        for bi in 0..s.batch {
            match axis {
                Axis::Rows => {
                    let o = (bi * s.rows + start) * s.cols;
                    v.extend_from_slice(&va[o..o + len * s.cols]);
                }
                Axis::Cols => {
                    for i in 0..s.rows {
                        let o = (bi * s.rows + i) * s.cols + start;
                        v.extend_from_slice(&va[o..o + len]);
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(v, out, Op::Slice(axis, a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.slice(Axis::Rows, a, start, len)
    }

    pub fn slice_cols(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.slice(Axis::Cols, a, start, len)
    }

    /// Selects rows (within every batch element) by index; repeated indices
    /// are allowed and their gradients accumulate.
    pub fn gather_rows(&mut self, a: Tensor, indices: &[usize]) -> Result<Tensor> {
        let s = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= s.rows) {
            return Err(DiffError::OutOfRange { op: "gather_rows", index: bad, extent: s.rows });
        }
        let out = Shape::new(s.batch, indices.len(), s.cols);
        let va = self.value(a);
        let mut v = Vec::with_capacity(out.numel());
        for bi in 0..s.batch {
            for &r in indices {
                let o = (bi * s.rows + r) * s.cols;
                v.extend_from_slice(&va[o..o + s.cols]);
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(v, out, Op::GatherRows(a, indices.into()), rg))
    }

    /// Reinterprets the row-major buffer under a new shape.
    pub fn reshape(&mut self, a: Tensor, shape: Shape) -> Result<Tensor> {
        let s = self.shape(a);
        if s.numel() != shape.numel() {
            return Err(DiffError::ShapeMismatch { op: "reshape", lhs: s, rhs: shape });
        }
        let v = self.value(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(v, shape, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(vec![v], Shape::SCALAR, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let n = self.shape(a).numel().max(1) as f64;
        let v = self.value(a).iter().sum::<f64>() / n;
        let rg = self.requires_grad(a);
        self.push(vec![v], Shape::SCALAR, Op::Mean(a), rg)
    }

    /// Solves `A X = B` per batch element; `A` may be shared across the batch.
    pub fn linear_solve(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let batch_ok = sa.batch == sb.batch || sa.batch == 1 || sb.batch == 1;
        if sa.rows != sa.cols || sa.rows != sb.rows || !batch_ok {
            return Err(DiffError::ShapeMismatch { op: "linear_solve", lhs: sa, rhs: sb });
        }
        let n = sa.rows;
        let mut lus = Vec::with_capacity(sa.batch);
        let va = self.value(a);
        for bi in 0..sa.batch {
            let lu = Lu::factor(&va[bi * n * n..(bi + 1) * n * n], n)
                .ok_or(DiffError::Singular { op: "linear_solve" })?;
            lus.push(lu);
        }
        let out = Shape::new(sa.batch.max(sb.batch), n, sb.cols);
        let vb = self.value(b);
        let mut v = Vec::with_capacity(out.numel());
        for bi in 0..out.batch {
            let lu = &lus[if sa.batch == 1 { 0 } else { bi }];
            let bo = if sb.batch == 1 { 0 } else { bi * sb.mat_len() };
            v.extend(lu.solve(&vb[bo..bo + sb.mat_len()], sb.cols));
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(v, out, Op::Solve(a, b, lus.into()), rg))
    }

    pub fn matrix_inverse(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.shape(a);
        if s.rows != s.cols {
            return Err(DiffError::InvalidShape { op: "matrix_inverse", shape: s });
        }
        let n = s.rows;
        let eye = kernels::identity(n);
        let va = self.value(a);
        let mut v = Vec::with_capacity(s.numel());
        for bi in 0..s.batch {
            let lu = Lu::factor(&va[bi * n * n..(bi + 1) * n * n], n)
                .ok_or(DiffError::Singular { op: "matrix_inverse" })?;
            v.extend(lu.solve(&eye, n));
        }
        let rg = self.requires_grad(a);
        Ok(self.push(v, s, Op::Inverse(a), rg))
    }

    /// Lower Cholesky factor; only the lower triangle of the input is read.
    pub fn cholesky(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.shape(a);
        if s.rows != s.cols {
            return Err(DiffError::InvalidShape { op: "cholesky", shape: s });
        }
        let n = s.rows;
        let va = self.value(a);
        let mut v = Vec::with_capacity(s.numel());
        for bi in 0..s.batch {
            let l = kernels::cholesky(&va[bi * n * n..(bi + 1) * n * n], n)
                .ok_or(DiffError::NotPositiveDefinite)?;
            v.extend(l);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(v, s, Op::Cholesky(a), rg))
    }

    /// `[B, n, n] -> [B, n, 1]`.
    pub fn diag_part(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.shape(a);
        if s.rows != s.cols {
            return Err(DiffError::InvalidShape { op: "diag_part", shape: s });
        }
        let n = s.rows;
        let va = self.value(a);
        let v = (0..s.batch)
            .flat_map(|bi| (0..n).map(move |i| bi * n * n + i * n + i))
            .map(|k| va[k])
            .collect();
        let rg = self.requires_grad(a);
        Ok(self.push(v, Shape::new(s.batch, n, 1), Op::DiagPart(a), rg))
    }

    /// `[B, n, 1] -> [B, n, n]` diagonal matrices.
    pub fn diag_embed(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.shape(a);
        if s.cols != 1 {
            return Err(DiffError::InvalidShape { op: "diag_embed", shape: s });
        }
        let n = s.rows;
        let va = self.value(a);
        let mut v = vec![0.0; s.batch * n * n];
        for bi in 0..s.batch {
            for i in 0..n {
                v[bi * n * n + i * n + i] = va[bi * n + i];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(v, Shape::new(s.batch, n, n), Op::DiagEmbed(a), rg))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar loss. Every leaf created with
    /// `requires_grad` receives a gradient (zeros when unreachable).
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(DiffError::NonScalarLoss(ls));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        let Graph { nodes, grads, .. } = self;

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = node.shape;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].shape, nodes[b.0].shape);
                    if nodes[a.0].requires_grad {
                        let vb = &nodes[b.0].value;
                        let ga = acc(grads, nodes, *a);
                        for bi in 0..out.batch {
                            let ao = if sa.batch == 1 { 0 } else { bi * sa.mat_len() };
                            let bo = if sb.batch == 1 { 0 } else { bi * sb.mat_len() };
                            kernels::matmul_nt_acc(
                                &g[bi * out.mat_len()..(bi + 1) * out.mat_len()],
                                &vb[bo..bo + sb.mat_len()],
                                &mut ga[ao..ao + sa.mat_len()],
                                sa.rows,
                                sb.cols,
                                sa.cols,
                            );
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let va = &nodes[a.0].value;
                        let gb = acc(grads, nodes, *b);
                        for bi in 0..out.batch {
                            let ao = if sa.batch == 1 { 0 } else { bi * sa.mat_len() };
                            let bo = if sb.batch == 1 { 0 } else { bi * sb.mat_len() };
                            kernels::matmul_tn_acc(
                                &va[ao..ao + sa.mat_len()],
                                &g[bi * out.mat_len()..(bi + 1) * out.mat_len()],
                                &mut gb[bo..bo + sb.mat_len()],
                                sa.rows,
                                sa.cols,
                                sb.cols,
                            );
                        }
                    }
                }
                Op::Binary(op, a, b) => {
                    let (sa, sb) = (nodes[a.0].shape, nodes[b.0].shape);
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    for (which, t) in [(0, *a), (1, *b)] {
                        if !nodes[t.0].requires_grad {
                            continue;
                        }
                        let st = nodes[t.0].shape;
                        let gt = acc(grads, nodes, t);
                        let mut k = 0;
                        for bi in 0..out.batch {
                            for i in 0..out.rows {
                                for j in 0..out.cols {
                                    let x = va[sa.bidx(bi, i, j)];
                                    let y = vb[sb.bidx(bi, i, j)];
                                    let d = match (op, which) {
                                        (BinaryOp::Add, _) => 1.0,
                                        (BinaryOp::Sub, 0) => 1.0,
                                        (BinaryOp::Sub, _) => -1.0,
                                        (BinaryOp::Mul, 0) => y,
                                        (BinaryOp::Mul, _) => x,
                                        (BinaryOp::Div, 0) => 1.0 / y,
                                        (BinaryOp::Div, _) => -x / (y * y),
                                    };
                                    gt[st.bidx(bi, i, j)] += g[k] * d;
                                    k += 1;
                                }
                            }
                        }
                    }
                }
                Op::Unary(op, a) => {
                    if nodes[a.0].requires_grad {
                        let x = &nodes[a.0].value;
                        let y = &node.value;
                        let ga = acc(grads, nodes, *a);
                        for k in 0..g.len() {
                            let d = match *op {
                                UnaryOp::Square => 2.0 * x[k],
                                UnaryOp::Exp => y[k],
                                UnaryOp::Log => 1.0 / x[k],
                                UnaryOp::Tanh => 1.0 - y[k] * y[k],
                                UnaryOp::Softplus => sigmoid(x[k]),
                                UnaryOp::Scale(c) => c,
                                UnaryOp::AddScalar(_) => 1.0,
                                UnaryOp::Clamp(lo, hi) => {
                                    if x[k] >= lo && x[k] <= hi {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                            ga[k] += g[k] * d;
                        }
                    }
                }
                Op::Transpose(a) => {
                    if nodes[a.0].requires_grad {
                        let ga = acc(grads, nodes, *a);
                        for bi in 0..out.batch {
                            let o = bi * out.mat_len();
                            for i in 0..out.rows {
                                for j in 0..out.cols {
                                    ga[o + j * out.rows + i] += g[o + i * out.cols + j];
                                }
                            }
                        }
                    }
                }
                Op::Symmetrize(a) => {
                    if nodes[a.0].requires_grad {
                        let n = out.rows;
                        let ga = acc(grads, nodes, *a);
                        for bi in 0..out.batch {
                            let o = bi * n * n;
                            for i in 0..n {
                                for j in 0..n {
                                    ga[o + i * n + j] += 0.5 * (g[o + i * n + j] + g[o + j * n + i]);
                                }
                            }
                        }
                    }
                }
                Op::Concat(axis, parts) => {
                    let mut offset = 0;
                    for &p in parts.iter() {
                        let sp = nodes[p.0].shape;
                        if nodes[p.0].requires_grad {
                            let gp = acc(grads, nodes, p);
                            for bi in 0..out.batch {
                                for i in 0..sp.rows {
                                    for j in 0..sp.cols {
                                        let (oi, oj) = match axis {
                                            Axis::Rows => (i + offset, j),
                                            Axis::Cols => (i, j + offset),
                                        };
                                        gp[(bi * sp.rows + i) * sp.cols + j] +=
                                            g[(bi * out.rows + oi) * out.cols + oj];
                                    }
                                }
                            }
                        }
                        offset += match axis {
                            Axis::Rows => sp.rows,
                            Axis::Cols => sp.cols,
                        };
                    }
                }
                Op::Slice(axis, a, start) => {
                    if nodes[a.0].requires_grad {
                        let sa = nodes[a.0].shape;
                        let ga = acc(grads, nodes, *a);
                        for bi in 0..out.batch {
                            for i in 0..out.rows {
                                for j in 0..out.cols {
                                    let (si, sj) = match axis {
                                        Axis::Rows => (i + start, j),
                                        Axis::Cols => (i, j + start),
                                    };
                                    ga[(bi * sa.rows + si) * sa.cols + sj] +=
                                        g[(bi * out.rows + i) * out.cols + j];
                                }
                            }
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    if nodes[a.0].requires_grad {
                        let sa = nodes[a.0].shape;
                        let ga = acc(grads, nodes, *a);
                        for bi in 0..out.batch {
                            for (k, &r) in idx.iter().enumerate() {
                                let src = (bi * out.rows + k) * out.cols;
                                let dst = (bi * sa.rows + r) * sa.cols;
                                for j in 0..out.cols {
                                    ga[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if nodes[a.0].requires_grad {
                        let ga = acc(grads, nodes, *a);
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    if nodes[a.0].requires_grad {
                        let n = nodes[a.0].shape.numel().max(1) as f64;
                        let d = if matches!(node.op, Op::Mean(_)) { g[0] / n } else { g[0] };
                        for x in acc(grads, nodes, *a).iter_mut() {
                            *x += d;
                        }
                    }
                }
                Op::Solve(a, b, lus) => {
                    let (sa, sb) = (nodes[a.0].shape, nodes[b.0].shape);
                    let n = sa.rows;
                    let c = out.cols;
                    // dB = A⁻ᵀ G, dA = -dB Xᵀ
                    let mut gbs = Vec::with_capacity(out.batch);
                    for bi in 0..out.batch {
                        let lu = &lus[if sa.batch == 1 { 0 } else { bi }];
                        gbs.push(lu.solve_transposed(&g[bi * n * c..(bi + 1) * n * c], c));
                    }
                    if nodes[b.0].requires_grad {
                        let gb = acc(grads, nodes, *b);
                        for (bi, gbi) in gbs.iter().enumerate() {
                            let bo = if sb.batch == 1 { 0 } else { bi * sb.mat_len() };
                            for (x, y) in gb[bo..bo + sb.mat_len()].iter_mut().zip(gbi) {
                                *x += y;
                            }
                        }
                    }
                    if nodes[a.0].requires_grad {
                        let x = &node.value;
                        let ga = acc(grads, nodes, *a);
                        for (bi, gbi) in gbs.iter().enumerate() {
                            let ao = if sa.batch == 1 { 0 } else { bi * n * n };
                            let neg: Vec<f64> = gbi.iter().map(|v| -v).collect();
                            kernels::matmul_nt_acc(
                                &neg,
                                &x[bi * n * c..(bi + 1) * n * c],
                                &mut ga[ao..ao + n * n],
                                n,
                                c,
                                n,
                            );
                        }
                    }
                }
                Op::Inverse(a) => {
                    if nodes[a.0].requires_grad {
                        let n = out.rows;
                        let x = &node.value;
                        let ga = acc(grads, nodes, *a);
                        for bi in 0..out.batch {
                            let o = bi * n * n;
                            let xb = &x[o..o + n * n];
                            // dA = -Xᵀ G Xᵀ
                            let mut tmp = vec![0.0; n * n];
                            kernels::matmul_tn_acc(xb, &g[o..o + n * n], &mut tmp, n, n, n);
                            let neg: Vec<f64> = tmp.iter().map(|v| -v).collect();
                            kernels::matmul_nt_acc(&neg, xb, &mut ga[o..o + n * n], n, n, n);
                        }
                    }
                }
                Op::Cholesky(a) => {
                    if nodes[a.0].requires_grad {
                        let n = out.rows;
                        let lval = &node.value;
                        let ga = acc(grads, nodes, *a);
                        for bi in 0..out.batch {
                            let o = bi * n * n;
                            let l = &lval[o..o + n * n];
                            // P = Φ(Lᵀ Ḡ), M = L⁻ᵀ P L⁻¹
                            let mut p = vec![0.0; n * n];
                            kernels::matmul_tn_acc(l, &g[o..o + n * n], &mut p, n, n, n);
                            for i in 0..n {
                                for j in 0..n {
                                    if j > i {
                                        p[i * n + j] = 0.0;
                                    } else if i == j {
                                        p[i * n + j] *= 0.5;
                                    }
                                }
                            }
                            let y = kernels::solve_lower_transposed(l, &p, n, n);
                            let yt = kernels::transpose(&y, n, n);
                            let mt = kernels::solve_lower_transposed(l, &yt, n, n);
                            let m = kernels::transpose(&mt, n, n);
                            for i in 0..n {
                                for j in 0..=i {
                                    let d = if i == j { m[i * n + i] } else { m[i * n + j] + m[j * n + i] };
                                    ga[o + i * n + j] += d;
                                }
                            }
                        }
                    }
                }
                Op::DiagPart(a) => {
                    if nodes[a.0].requires_grad {
                        let n = out.rows;
                        let ga = acc(grads, nodes, *a);
                        for bi in 0..out.batch {
                            for i in 0..n {
                                ga[bi * n * n + i * n + i] += g[bi * n + i];
                            }
                        }
                    }
                }
                Op::DiagEmbed(a) => {
                    if nodes[a.0].requires_grad {
                        let n = out.rows;
                        let ga = acc(grads, nodes, *a);
                        for bi in 0..out.batch {
                            for i in 0..n {
                                ga[bi * n + i] += g[bi * n * n + i * n + i];
                            }
                        }
                    }
                }
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    if grads[id].is_none() {
                        grads[id] = Some(vec![0.0; node.shape.numel()]);
                    }
                } else {
                    grads[id] = None;
                }
            } else {
                grads[id] = None;
            }
        }
        self.backward_done = true;
        Ok(())
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], t: Tensor) -> &'a mut Vec<f64> {
    grads[t.0].get_or_insert_with(|| vec![0.0; nodes[t.0].shape.numel()])
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "elementwise_mul",
        BinaryOp::Div => "div",
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
