//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every training step. Every node is a matrix
//! (`rows × cols`; scalars are `1 × 1`). A node needs a gradient iff one of
//! its ancestors is a leaf created with `requires_grad`, so backward never
//! touches frozen subgraphs and never allocates gradients for frozen leaves.

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Exp(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm(Var),
    NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy(Var, Vec<usize>),
    Mse(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherCols(Var, Vec<usize>),
    /// Scalar node whose partial derivatives w.r.t. each parent were
    /// computed during the forward pass.
    Fused(Vec<Var>, Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order, which is
/// also a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `c (+)= op(a) · op(b)` with optional transposition of either operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // dense row-major (or transposed) views that stay inside them.
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

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

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn dims(&self, v: Var) -> [usize; 2] {
        let n = self.node(v);
        [n.rows, n.cols]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    /// Records a leaf holding a copy of `t`. A gradient is tracked iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("constant", &[rows, cols], &[value.len()]));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.push(1, 1, vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape")
    }

    /// Gradient of the last backward pass for `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.dims(a);
        let [k2, n] = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let [r, c] = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let g = self.any_grad(&[a]);
        self.push(c, r, out, Op::Transpose(a), g)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, &self.dims(a), &self.dims(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let [r, c] = self.dims(a);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let [r, c] = self.dims(a);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(r, c, out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let [r, c] = self.dims(a);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), g))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let [r, c] = self.dims(a);
        if self.dims(row) != [1, c] {
            return Err(Error::shape(op, &[r, c], &self.dims(row)));
        }
        Ok((r, c))
    }

    /// `a + row`, broadcasting a `1 × c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check_row("add_row", a, row)?;
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(rv).map(|(p, q)| p + q))
            .collect();
        let g = self.any_grad(&[a, row]);
        Ok(self.push(r, c, out, Op::AddRow(a, row), g))
    }

    /// `a ∘ row`, broadcasting a `1 × c` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check_row("mul_row", a, row)?;
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(rv).map(|(p, q)| p * q))
            .collect();
        let g = self.any_grad(&[a, row]);
        Ok(self.push(r, c, out, Op::MulRow(a, row), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let [r, c] = self.dims(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let g = self.any_grad(&[a]);
        self.push(r, c, out, Op::Scale(a, s), g)
    }

    /// `a · s` where `s` is a `1 × 1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != [1, 1] {
            return Err(Error::shape("scale_by", &self.dims(a), &self.dims(s)));
        }
        let sv = self.scalar(s);
        let [r, c] = self.dims(a);
        let out = self.value(a).iter().map(|x| x * sv).collect();
        let g = self.any_grad(&[a, s]);
        Ok(self.push(r, c, out, Op::ScaleBy(a, s), g))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let [r, c] = self.dims(a);
        let out = self.value(a).iter().map(|x| x + s).collect();
        let g = self.any_grad(&[a]);
        self.push(r, c, out, Op::AddScalar(a), g)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let [r, c] = self.dims(a);
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let g = self.any_grad(&[a]);
        self.push(r, c, out, op, g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let [r, c] = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let g = self.any_grad(&[a]);
        self.push(r, c, out, Op::Softmax(a), g)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let [r, c] = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * inv);
        }
        let g = self.any_grad(&[a]);
        self.push(r, c, out, Op::LayerNorm(a), g)
    }

    /// Scales every row to unit L2 norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.dims(a);
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("row {i} has zero norm")));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(r, c, out, Op::NormalizeRows(a), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let g = self.any_grad(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let g = self.any_grad(&[a]);
        self.push(1, 1, vec![s], Op::Mean(a), g)
    }

    /// Mean softmax cross-entropy of each row against its target column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [r, c] = self.dims(logits);
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape("cross_entropy", &[r, c], &[targets.len()]));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (row, &t) in v.chunks(c).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let g = self.any_grad(&[logits]);
        Ok(self.push(1, 1, vec![total / r as f64], Op::CrossEntropy(logits, targets.to_vec()), g))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip_same("mse", a, b, |x, y| (x - y) * (x - y))?;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(1, 1, vec![m], Op::Mse(a, b), g))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [rows, _] = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::OutOfVocabulary { id: bad, size: rows });
        }
        self.gather_rows(table, ids)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let [r, c] = self.dims(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::shape("gather_rows", &[r, c], &[idx.len()]));
        }
        let v = self.value(a);
        let out = idx.iter().flat_map(|&i| v[i * c..(i + 1) * c].iter().copied()).collect();
        let g = self.any_grad(&[a]);
        Ok(self.push(idx.len(), c, out, Op::GatherRows(a, idx.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|p| self.dims(*p)[1])
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let [r, pc] = self.dims(*p);
            if pc != c {
                return Err(Error::shape("concat_rows", &[rows, c], &[r, pc]));
            }
            rows += r;
            out.extend_from_slice(self.value(*p));
        }
        let g = self.any_grad(parts);
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.dims(a);
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let g = self.any_grad(&[a]);
        Ok(self.push(len, c, out, Op::SliceRows(a, start), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|p| self.dims(*p)[0])
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let mut total = 0;
        for p in parts {
            let [pr, pc] = self.dims(*p);
            if pr != r {
                return Err(Error::shape("concat_cols", &[r, total], &[pr, pc]));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let [_, pc] = self.dims(*p);
                out.extend_from_slice(&self.value(*p)[i * pc..(i + 1) * pc]);
            }
        }
        let g = self.any_grad(parts);
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.dims(a);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let v = self.value(a);
        let out = (0..r)
            .flat_map(|i| v[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let g = self.any_grad(&[a]);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), g))
    }

    /// Column gather: `out[i][j] = a[i][idx[j]]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let [r, c] = self.dims(a);
        if idx.is_empty() || idx.iter().any(|&j| j >= c) {
            return Err(Error::shape("gather_cols", &[r, c], &[idx.len()]));
        }
        let v = self.value(a);
        let out = (0..r)
            .flat_map(|i| idx.iter().map(move |&j| v[i * c + j]))
            .collect();
        let g = self.any_grad(&[a]);
        Ok(self.push(r, idx.len(), out, Op::GatherCols(a, idx.to_vec()), g))
    }

    /// Records a scalar whose value and partial derivatives w.r.t. `parents`
    /// were computed outside the graph.
    pub fn fused_scalar(&mut self, parents: &[Var], value: f64, partials: Vec<Vec<f64>>) -> Result<Var> {
        if parents.len() != partials.len() {
            return Err(Error::InvalidArgument("fused_scalar: one partial per parent".into()));
        }
        for (p, d) in parents.iter().zip(&partials) {
            if self.value(*p).len() != d.len() {
                return Err(Error::shape("fused_scalar", &self.dims(*p), &[d.len()]));
            }
        }
        let g = self.any_grad(parents);
        Ok(self.push(1, 1, vec![value], Op::Fused(parents.to_vec(), partials), g))
    }

    // ---- backward --------------------------------------------------------

    /// Propagates `d loss / d node` to every node that depends on a tracked
    /// leaf. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Backward(format!("node {} is not part of this graph", loss.0)))?;
        if node.rows * node.cols != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got {}x{}",
                node.rows, node.cols
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !node.needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, g: &[f64]) {
        if self.nodes[v.0].needs_grad {
            add_into(&mut self.grads[v.0], g);
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&Graph) -> Vec<f64>) {
        if self.nodes[v.0].needs_grad {
            let g = f(self);
            add_into(&mut self.grads[v.0], &g);
        }
    }

    fn propagate(&mut self, i: usize, dy: &[f64]) {
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.dims(a);
                let n = cols;
                self.acc_with(a, |g| {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy, false, g.value(b), true, &mut da, false);
                    da
                });
                self.acc_with(b, |g| {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, g.value(a), true, dy, false, &mut db, false);
                    db
                });
            }
            Op::Transpose(a) => {
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[c * rows + r] = dy[r * cols + c];
                    }
                }
                self.acc(a, &da);
            }
            Op::Add(a, b) => {
                self.acc(a, dy);
                self.acc(b, dy);
            }
            Op::AddRow(a, row) => {
                self.acc(a, dy);
                self.acc_with(row, |_| col_sums(dy, cols));
            }
            Op::Sub(a, b) => {
                self.acc(a, dy);
                self.acc_with(b, |_| dy.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                self.acc_with(a, |g| dy.iter().zip(g.value(b)).map(|(d, y)| d * y).collect());
                self.acc_with(b, |g| dy.iter().zip(g.value(a)).map(|(d, x)| d * x).collect());
            }
            Op::MulRow(a, row) => {
                self.acc_with(a, |g| {
                    let rv = g.value(row);
                    dy.chunks(cols)
                        .flat_map(|d| d.iter().zip(rv).map(|(p, q)| p * q))
                        .collect()
                });
                self.acc_with(row, |g| {
                    let prod: Vec<f64> = dy.iter().zip(g.value(a)).map(|(d, x)| d * x).collect();
                    col_sums(&prod, cols)
                });
            }
            Op::Scale(a, s) => self.acc_with(a, |_| dy.iter().map(|d| d * s).collect()),
            Op::ScaleBy(a, s) => {
                self.acc_with(a, |g| {
                    let sv = g.scalar(s);
                    dy.iter().map(|d| d * sv).collect()
                });
                self.acc_with(s, |g| vec![dy.iter().zip(g.value(a)).map(|(d, x)| d * x).sum()]);
            }
            Op::AddScalar(a) => self.acc(a, dy),
            Op::Exp(a) => {
                self.acc_with(a, |g| dy.iter().zip(&g.nodes[i].value).map(|(d, y)| d * y).collect())
            }
            Op::Sigmoid(a) => self.acc_with(a, |g| {
                dy.iter()
                    .zip(&g.nodes[i].value)
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect()
            }),
            Op::Gelu(a) => self.acc_with(a, |g| {
                dy.iter().zip(g.value(a)).map(|(d, x)| d * gelu_grad(*x)).collect()
            }),
            Op::Softmax(a) => self.acc_with(a, |g| {
                let y = &g.nodes[i].value;
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), out) in dy.chunks(cols).zip(y.chunks(cols)).zip(da.chunks_mut(cols)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                    for ((o, d), y) in out.iter_mut().zip(dr).zip(yr) {
                        *o = y * (d - dot);
                    }
                }
                da
            }),
            Op::LayerNorm(a) => self.acc_with(a, |g| {
                let x = g.value(a);
                let y = &g.nodes[i].value;
                let n = cols as f64;
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let xr = &x[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dr = &dy[r * cols..(r + 1) * cols];
                    let mu = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let mean_d = dr.iter().sum::<f64>() / n;
                    let mean_dy = dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / n;
                    for c in 0..cols {
                        da[r * cols + c] = inv * (dr[c] - mean_d - yr[c] * mean_dy);
                    }
                }
                da
            }),
            Op::NormalizeRows(a) => self.acc_with(a, |g| {
                let x = g.value(a);
                let y = &g.nodes[i].value;
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let norm = x[s.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = dy[s.clone()].iter().zip(&y[s.clone()]).map(|(d, y)| d * y).sum();
                    for c in s {
                        da[c] = (dy[c] - y[c] * dot) / norm;
                    }
                }
                da
            }),
            Op::Sum(a) => self.acc_with(a, |g| vec![dy[0]; g.value(a).len()]),
            Op::Mean(a) => self.acc_with(a, |g| {
                let n = g.value(a).len();
                vec![dy[0] / n as f64; n]
            }),
            Op::CrossEntropy(a, targets) => self.acc_with(a, |g| {
                let [r, c] = g.dims(a);
                let mut da = g.value(a).to_vec();
                for (row, &t) in da.chunks_mut(c).zip(&targets) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        s += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= s);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= dy[0] / r as f64);
                }
                da
            }),
            Op::Mse(a, b) => {
                let n = self.value(a).len() as f64;
                let diff: Vec<f64> = self
                    .value(a)
                    .iter()
                    .zip(self.value(b))
                    .map(|(x, y)| 2.0 * (x - y) / n * dy[0])
                    .collect();
                self.acc(a, &diff);
                self.acc_with(b, |_| diff.iter().map(|d| -d).collect());
            }
            Op::GatherRows(a, idx) => self.acc_with(a, |g| {
                let [r, c] = g.dims(a);
                let mut da = vec![0.0; r * c];
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[src * c + j] += dy[k * c + j];
                    }
                }
                da
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).len();
                    self.acc(p, &dy[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => self.acc_with(a, |g| {
                let mut da = vec![0.0; g.value(a).len()];
                da[start * cols..(start + rows) * cols].copy_from_slice(dy);
                da
            }),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let [_, pc] = self.dims(p);
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            dp.extend_from_slice(&dy[r * cols + offset..r * cols + offset + pc]);
                        }
                        self.acc(p, &dp);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => self.acc_with(a, |g| {
                let [_, c] = g.dims(a);
                let mut da = vec![0.0; rows * c];
                for r in 0..rows {
                    da[r * c + start..r * c + start + cols].copy_from_slice(&dy[r * cols..(r + 1) * cols]);
                }
                da
            }),
            Op::GatherCols(a, idx) => self.acc_with(a, |g| {
                let [_, c] = g.dims(a);
                let mut da = vec![0.0; rows * c];
                for r in 0..rows {
                    for (k, &j) in idx.iter().enumerate() {
                        da[r * c + j] += dy[r * cols + k];
                    }
                }
                da
            }),
            Op::Fused(parents, partials) => {
                for (p, d) in parents.iter().zip(&partials) {
                    let scaled: Vec<f64> = d.iter().map(|x| x * dy[0]).collect();
                    self.acc(*p, &scaled);
                }
            }
        }
    }
}

fn col_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in m.chunks(cols) {
        out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, r: usize, c: usize, v: &[f64], grad: bool) -> Var {
        g.leaf(&Tensor::new(vec![r, c], v.to_vec()).unwrap().with_requires_grad(grad))
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        let b = mat(&mut g, 2, 1, &[5.0, 6.0], false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = mat(&mut g, 3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.], false);
        let a_vals = [0.5, -1.0, 2.0, 3.0, 0.25, 7.0];
        let a = mat(&mut g, 3, 2, &a_vals, false);
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c), &a_vals);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, &[0.0; 6], false);
        let b = mat(&mut g, 2, 3, &[0.0; 6], false);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = mat(&mut g, 1, 3, &[0.0; 3], false);
        let s = g.softmax(a);
        for v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gives_ones_and_constants_give_nothing() {
        let mut g = Graph::new();
        let c = mat(&mut g, 2, 2, &[1.0, -2.0, 3.0, 0.5], true);
        let frozen = mat(&mut g, 2, 2, &[1.0; 4], false);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(c).unwrap(), &[1.0; 4]);
        assert!(g.grad(frozen).is_none());

        let mut g = Graph::new();
        let k = mat(&mut g, 1, 2, &[1.0, 2.0], false);
        let s = g.sum(k);
        g.backward(s).unwrap();
        assert!(g.grad(k).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = mat(&mut g, 1, 2, &[1.0, 2.0], true);
        assert!(g.backward(a).is_err());
        assert!(g.backward(Var(99)).is_err());
    }

    #[test]
    fn frozen_subgraph_still_routes_gradient_upstream() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[0.3, -0.7], true);
        let w = mat(&mut g, 2, 2, &[1.0, 2.0, -1.0, 0.5], false);
        let h = g.matmul(x, w).unwrap();
        let y = g.gelu(h);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(x).unwrap().iter().any(|v| *v != 0.0));
    }
}
