//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`GradientTape`] records every primitive applied during a forward pass.
//! Leaves are either constants or parameters; an operation node requires a
//! gradient when any of its inputs does. [`GradientTape::backward`] replays
//! the record in exact reverse order and returns gradients for the parameter
//! leaves only.

use super::matrix::{self, Matrix};
use super::KernelError;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Parameter,
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Log-softmax of each row of a square matrix over the off-diagonal
    /// entries only; the diagonal output is fixed at zero.
    LogSoftmaxOffDiagonal(Var),
    L2NormalizeRows(Var),
    SliceRows(Var, usize),
    MeanRows(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward pass, indexed by parameter [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a parameter leaf. A parameter the loss does not depend on
    /// gets an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Single-writer operation record.
#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn check_live(&self) -> Result<(), KernelError> {
        if self.consumed {
            Err(KernelError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn parameter(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Parameter, true)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = self.value(a).transpose();
        Ok(self.unary(a, value, Op::Transpose(a)))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = self.value(x).add_row_bias(self.value(bias))?;
        Ok(self.binary(x, bias, value, Op::AddRowBias(x, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = self.value(a).map(|v| v.max(0.0));
        Ok(self.unary(a, value, Op::Relu(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = self.value(a).scale(s);
        Ok(self.unary(a, value, Op::Scale(a, s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = self.value(a).map(|v| v + s);
        Ok(self.unary(a, value, Op::AddScalar(a)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = self.value(a).map(|v| v * v);
        Ok(self.unary(a, value, Op::Square(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = self.value(a).map(f64::ln);
        Ok(self.unary(a, value, Op::Log(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = matrix::softmax_rows(self.value(a));
        Ok(self.unary(a, value, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = matrix::log_softmax_rows(self.value(a));
        Ok(self.unary(a, value, Op::LogSoftmaxRows(a)))
    }

    /// Row log-softmax of a square matrix that excludes the diagonal from
    /// both the output and the normaliser. Needs at least two columns.
    pub fn log_softmax_off_diagonal(&mut self, a: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let input = self.value(a);
        if input.rows() != input.cols() || input.cols() < 2 {
            return Err(KernelError::shape("log_softmax_off_diagonal", input, input));
        }
        let n = input.cols();
        let mut value = Matrix::zeros(n, n);
        for r in 0..n {
            let row = input.row(r);
            let max = row
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != r)
                .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
            let sum = row
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != r)
                .fold(0.0, |acc, (_, &v)| acc + (v - max).exp());
            let lse = sum.ln() + max;
            for c in 0..n {
                if c != r {
                    value.set(r, c, row[c] - lse);
                }
            }
        }
        Ok(self.unary(a, value, Op::LogSoftmaxOffDiagonal(a)))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = matrix::l2_normalize_rows(self.value(a))?;
        Ok(self.unary(a, value, Op::L2NormalizeRows(a)))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, KernelError> {
        self.check_live()?;
        let input = self.value(a);
        if start > end || end > input.rows() {
            return Err(KernelError::RowRange {
                start,
                end,
                rows: input.rows(),
            });
        }
        let value = input.slice_rows(start, end);
        Ok(self.unary(a, value, Op::SliceRows(a, start)))
    }

    /// Column means, `1 × cols`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        if self.value(a).rows() == 0 {
            return Err(KernelError::EmptyReduction);
        }
        let value = self.value(a).mean_rows();
        Ok(self.unary(a, value, Op::MeanRows(a)))
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var, KernelError> {
        self.check_live()?;
        let value = Matrix::filled(1, 1, self.value(a).sum());
        Ok(self.unary(a, value, Op::Sum(a)))
    }

    /// Mean of all entries, `1 × 1`.
    pub fn mean(&mut self, a: Var) -> Result<Var, KernelError> {
        let n = self.value(a).data().len();
        if n == 0 {
            return Err(KernelError::EmptyReduction);
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse pass from the scalar `loss`. The tape is consumed: afterwards
    /// every recording call and a second `backward` return
    /// [`KernelError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, KernelError> {
        self.check_live()?;
        if self.nodes.is_empty() {
            return Err(KernelError::EmptyTape);
        }
        let shape = self.nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(KernelError::NonScalarLoss { shape });
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);

        let mut adj: Vec<Option<Matrix>> = vec![None; nodes.len()];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else {
                continue;
            };
            let out = &node.value;
            match node.op {
                Op::Constant => {}
                Op::Parameter => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].tracked {
                        let da = matrix::matmul(&g, &nodes[b.0].value.transpose())?;
                        accumulate(&mut adj, a, da)?;
                    }
                    if nodes[b.0].tracked {
                        let db = matrix::matmul(&nodes[a.0].value.transpose(), &g)?;
                        accumulate(&mut adj, b, db)?;
                    }
                }
                Op::Transpose(a) => accumulate(&mut adj, a, g.transpose())?,
                Op::AddRowBias(x, b) => {
                    if nodes[b.0].tracked {
                        accumulate(&mut adj, b, g.sum_rows())?;
                    }
                    if nodes[x.0].tracked {
                        accumulate(&mut adj, x, g)?;
                    }
                }
                Op::Relu(a) => {
                    let mask = nodes[a.0].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adj, a, g.hadamard(&mask)?)?;
                }
                Op::Add(a, b) => {
                    if nodes[b.0].tracked {
                        accumulate(&mut adj, b, g.clone())?;
                    }
                    if nodes[a.0].tracked {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[b.0].tracked {
                        accumulate(&mut adj, b, g.scale(-1.0))?;
                    }
                    if nodes[a.0].tracked {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].tracked {
                        accumulate(&mut adj, a, g.hadamard(&nodes[b.0].value)?)?;
                    }
                    if nodes[b.0].tracked {
                        accumulate(&mut adj, b, g.hadamard(&nodes[a.0].value)?)?;
                    }
                }
                Op::Scale(a, s) => accumulate(&mut adj, a, g.scale(s))?,
                Op::AddScalar(a) => accumulate(&mut adj, a, g)?,
                Op::Square(a) => {
                    let d = g.hadamard(&nodes[a.0].value.scale(2.0))?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Log(a) => {
                    let x = &nodes[a.0].value;
                    let mut d = g;
                    for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                        *dv /= xv;
                    }
                    accumulate(&mut adj, a, d)?;
                }
                Op::SoftmaxRows(a) => {
                    let mut d = g;
                    for r in 0..d.rows() {
                        let y = out.row(r);
                        let row = d.row_mut(r);
                        let dot = row.iter().zip(y).fold(0.0, |acc, (g, y)| acc + g * y);
                        for (gv, yv) in row.iter_mut().zip(y) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut adj, a, d)?;
                }
                Op::LogSoftmaxRows(a) => {
                    let mut d = g;
                    for r in 0..d.rows() {
                        let l = out.row(r);
                        let row = d.row_mut(r);
                        let total = row.iter().fold(0.0, |acc, v| acc + v);
                        for (gv, lv) in row.iter_mut().zip(l) {
                            *gv -= lv.exp() * total;
                        }
                    }
                    accumulate(&mut adj, a, d)?;
                }
                Op::LogSoftmaxOffDiagonal(a) => {
                    let mut d = g;
                    for r in 0..d.rows() {
                        let l = out.row(r);
                        let row = d.row_mut(r);
                        let total = row
                            .iter()
                            .enumerate()
                            .filter(|&(c, _)| c != r)
                            .fold(0.0, |acc, (_, v)| acc + v);
                        for (c, (gv, lv)) in row.iter_mut().zip(l).enumerate() {
                            if c == r {
                                *gv = 0.0;
                            } else {
                                *gv -= lv.exp() * total;
                            }
                        }
                    }
                    accumulate(&mut adj, a, d)?;
                }
                Op::L2NormalizeRows(a) => {
                    let x = &nodes[a.0].value;
                    let mut d = g;
                    for r in 0..d.rows() {
                        let y = out.row(r);
                        let norm = x.row(r).iter().fold(0.0, |acc, v| acc + v * v).sqrt();
                        let row = d.row_mut(r);
                        let dot = row.iter().zip(y).fold(0.0, |acc, (g, y)| acc + g * y);
                        for (gv, yv) in row.iter_mut().zip(y) {
                            *gv = (*gv - yv * dot) / norm;
                        }
                    }
                    accumulate(&mut adj, a, d)?;
                }
                Op::SliceRows(a, start) => {
                    let src = &nodes[a.0].value;
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, a, d)?;
                }
                Op::MeanRows(a) => {
                    let src = &nodes[a.0].value;
                    let n = src.rows() as f64;
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for (dv, gv) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                            *dv = gv / n;
                        }
                    }
                    accumulate(&mut adj, a, d)?;
                }
                Op::Sum(a) => {
                    let src = &nodes[a.0].value;
                    accumulate(
                        &mut adj,
                        a,
                        Matrix::filled(src.rows(), src.cols(), g.get(0, 0)),
                    )?;
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(adj)
            .map(|(node, g)| match node.op {
                Op::Parameter => {
                    Some(g.unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols())))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, d: Matrix) -> Result<(), KernelError> {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => {
            *slot = Some(d);
            Ok(())
        }
    }
}
