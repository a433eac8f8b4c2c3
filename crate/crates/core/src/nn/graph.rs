//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value.
//! [`Graph::backward`] walks the tape in reverse from a scalar root. Nodes
//! that do not depend on a parameter are never visited, so constants and
//! detached values cost nothing in the backward pass.
//!
//! Derivatives of the primitive ops are themselves expressible with the same
//! ops, which is what lets the critic's input-gradient be built as an
//! ordinary forward graph and differentiated again (see
//! [`crate::nn::BoundMlp::input_gradient`]).

use super::Matrix;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    ReluMask,
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Matrix> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let t = self.tracked(a);
        self.push(value, op, t)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, op, t)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `v`, cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(false, self.value(b), true);
        self.binary(a, b, v, Op::MatMulNt(a, b))
    }

    /// Adds a 1xC row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(xv.cols(), rv.cols(), "add_row column mismatch");
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.binary(x, row, v, Op::AddRow(x, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    /// Multiplies every row `r` of `x` by the scalar `col[r]` (col is Rx1).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!(cv.shape(), (xv.rows(), 1), "mul_col expects an Rx1 column");
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let k = cv.get(r, 0);
            for o in v.row_mut(r) {
                *o *= k;
            }
        }
        self.binary(x, col, v, Op::MulCol(x, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.unary(a, v, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.unary(a, v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    /// Indicator `x > 0`, piecewise constant (zero derivative).
    pub fn relu_mask(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(v, Op::ReluMask, false)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.unary(a, v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.unary(a, v, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::min);
        self.binary(a, b, v, Op::Min(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.unary(a, v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = (m.rows() * m.cols()).max(1) as f64;
        let v = Matrix::scalar(m.sum() / n);
        self.unary(a, v, Op::MeanAll(a))
    }

    /// Column-wise mean, RxC -> 1xC.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.unary(a, v, Op::MeanRows(a))
    }

    /// Row-wise sum, RxC -> Rx1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sums();
        self.unary(a, v, Op::SumCols(a))
    }

    /// Repeats a 1xC row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a).repeat_row(n);
        self.unary(a, v, Op::BroadcastRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hcat(&mats);
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vcat(&mats);
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        self.unary(a, v, Op::SliceCols(a, start))
    }

    /// Gradients of the scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be a scalar");
        let n = root.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(Matrix::scalar(1.0));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        let acc = |v: Var, delta: Matrix, grads: &mut [Option<Matrix>]| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::ReluMask => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.matmul_t(false, self.value(*b), true), grads);
                }
                if self.tracked(*b) {
                    acc(*b, self.value(*a).matmul_t(true, g, false), grads);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.matmul(self.value(*b)), grads);
                }
                if self.tracked(*b) {
                    acc(*b, g.matmul_t(true, self.value(*a), false), grads);
                }
            }
            Op::AddRow(x, row) => {
                if self.tracked(*row) {
                    acc(*row, g.col_sums(), grads);
                }
                acc(*x, g.clone(), grads);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                if self.tracked(*b) {
                    acc(*b, g.map(|x| -x), grads);
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y), grads);
                }
                if self.tracked(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y), grads);
                }
            }
            Op::MulCol(x, col) => {
                let cv = self.value(*col);
                if self.tracked(*x) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let k = cv.get(r, 0);
                        for o in d.row_mut(r) {
                            *o *= k;
                        }
                    }
                    acc(*x, d, grads);
                }
                if self.tracked(*col) {
                    let d = g.zip_map(self.value(*x), |a, b| a * b).row_sums();
                    acc(*col, d, grads);
                }
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k), grads),
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)), grads),
            Op::Relu(a) => {
                acc(*a, g.zip_map(self.value(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 }), grads)
            }
            Op::Exp(a) => acc(*a, g.zip_map(y, |gi, yi| gi * yi), grads),
            Op::Softplus(a) => acc(*a, g.zip_map(self.value(*a), |gi, xi| gi * sigmoid(xi)), grads),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gi, xi| 2.0 * gi * xi), grads),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gi, xi| {
                    if xi > 0.0 {
                        gi
                    } else if xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                }),
                grads,
            ),
            Op::Sqrt(a) => acc(*a, g.zip_map(y, |gi, yi| if yi > 0.0 { gi / (2.0 * yi) } else { 0.0 }), grads),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*a, g.zip_map(self.value(*a), |gi, xi| if xi > lo && xi < hi { gi } else { 0.0 }), grads)
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let mut d = g.clone();
                    for ((o, x), z) in d.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        if x > z {
                            *o = 0.0;
                        }
                    }
                    acc(*a, d, grads);
                }
                if self.tracked(*b) {
                    let mut d = g.clone();
                    for ((o, x), z) in d.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        if x <= z {
                            *o = 0.0;
                        }
                    }
                    acc(*b, d, grads);
                }
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()), grads)
            }
            Op::MeanAll(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c).max(1) as f64;
                acc(*a, Matrix::filled(r, c, g.item() / n), grads)
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let mut d = g.repeat_row(rows);
                d.scale_assign(1.0 / rows.max(1) as f64);
                acc(*a, d, grads)
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    for o in d.row_mut(i) {
                        *o = gi;
                    }
                }
                acc(*a, d, grads)
            }
            Op::BroadcastRows(a) => acc(*a, g.col_sums(), grads),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.tracked(p) {
                        acc(p, g.slice_cols(start, start + w), grads);
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.tracked(p) {
                        let idx: Vec<usize> = (start..start + h).collect();
                        acc(p, g.select_rows(&idx), grads);
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Matrix::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    d.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                acc(*a, d, grads)
            }
        }
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}
