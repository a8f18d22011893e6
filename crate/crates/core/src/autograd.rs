//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] is an append-only arena of [`Node`]s. Recording an operation
//! computes its forward value immediately and returns a [`VarId`] handle;
//! [`Tape::backward`] then walks the arena once in reverse, accumulating
//! exact gradients for every leaf that requires them. The operation set is
//! closed and small on purpose: each backward rule is certified against
//! central finite differences in isolation, and the whole increment
//! predictor plus loss stack is expressible in it.
//!
//! Row-wise reductions (`row_softmax`, `logsumexp_rows`, `variance_rows`,
//! `l2_norm_rows`, `cosine_rows`, `normalize_rows`) treat each row of the
//! input independently. `cosine_rows` is a first-class primitive so its
//! backward is literally the bracketed similarity gradient used by the
//! closed-form oracle, which lets tests compare the two directly.

use crate::error::{Error, Result};
use crate::matrix::{dot, l2_norm, Matrix, DELTA_NORM};

/// Handle to a node on a specific tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    ScalarMul(VarId, f64),
    RowSoftmax(VarId),
    Exp(VarId),
    Log(VarId),
    L2NormRows(VarId),
    CosineRows(VarId, VarId),
    Mean(VarId),
    VarianceRows(VarId),
    LogSumExpRows(VarId),
    Negate(VarId),
    ClampMin(VarId, f64),
    Square(VarId),
    GatherRows(VarId, Vec<usize>),
    Reshape(VarId),
    Transpose(VarId),
    NormalizeRows(VarId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Matrix> {
        self.by_node.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or a zero matrix of the leaf's shape if no path
    /// from the root reached it.
    pub fn get_or_zeros(&self, id: VarId, tape: &Tape) -> Matrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(id).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Append-only record of a computation, single-owner while recording.
#[derive(Debug, Default)]
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

    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-trainable leaf; backward never descends into it.
    pub fn constant(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn push_unary(&mut self, op: Op, input: VarId, value: Matrix) -> VarId {
        let rg = self.nodes[input.0].requires_grad;
        self.push(op, value, rg)
    }

    fn push_binary(&mut self, op: Op, a: VarId, b: VarId, value: Matrix) -> VarId {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(op, value, rg)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_binary(Op::MatMul(a, b), a, b, value))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push_binary(Op::Add(a, b), a, b, value))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push_binary(Op::Sub(a, b), a, b, value))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push_binary(Op::Mul(a, b), a, b, value))
    }

    pub fn scalar_mul(&mut self, x: VarId, k: f64) -> VarId {
        let value = self.value(x).scale(k);
        self.push_unary(Op::ScalarMul(x, k), x, value)
    }

    /// Numerically stable softmax of every row.
    pub fn row_softmax(&mut self, x: VarId) -> VarId {
        let input = self.value(x);
        let (n, m) = input.shape();
        let mut value = Matrix::zeros(n, m);
        for r in 0..n {
            softmax_into(input.row(r), value.row_mut(r));
        }
        self.push_unary(Op::RowSoftmax(x), x, value)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(f64::exp);
        self.push_unary(Op::Exp(x), x, value)
    }

    /// Natural log; the caller is responsible for keeping inputs positive.
    pub fn log(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(f64::ln);
        self.push_unary(Op::Log(x), x, value)
    }

    /// Euclidean norm of every row, as an `n x 1` column.
    pub fn l2_norm_rows(&mut self, x: VarId) -> VarId {
        let input = self.value(x);
        let data = (0..input.rows()).map(|r| l2_norm(input.row(r))).collect();
        let value = Matrix::from_vec(input.rows(), 1, data).expect("sized by construction");
        self.push_unary(Op::L2NormRows(x), x, value)
    }

    /// Cosine similarity of corresponding rows of `a` and `b`, as an
    /// `n x 1` column. Rows whose norm falls below the floor are an error.
    pub fn cosine_rows(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.shape() != mb.shape() {
            return Err(Error::shape(
                "cosine-rows",
                format!("{:?} vs {:?}", ma.shape(), mb.shape()),
            ));
        }
        let mut data = Vec::with_capacity(ma.rows());
        for r in 0..ma.rows() {
            let (ra, rb) = (ma.row(r), mb.row(r));
            let norm = l2_norm(ra).min(l2_norm(rb));
            if norm <= DELTA_NORM {
                return Err(Error::DegenerateNorm {
                    context: format!("cosine-rows row {r}"),
                    norm,
                    floor: DELTA_NORM,
                });
            }
            data.push(dot(ra, rb) / (l2_norm(ra) * l2_norm(rb)));
        }
        let value = Matrix::from_vec(ma.rows(), 1, data).expect("sized by construction");
        Ok(self.push_binary(Op::CosineRows(a, b), a, b, value))
    }

    /// Mean of all entries, as a `1 x 1` scalar.
    pub fn mean(&mut self, x: VarId) -> VarId {
        let input = self.value(x);
        let n = (input.rows() * input.cols()) as f64;
        let value = Matrix::scalar(input.data().iter().sum::<f64>() / n);
        self.push_unary(Op::Mean(x), x, value)
    }

    /// Population variance of every row, as an `n x 1` column.
    pub fn variance_rows(&mut self, x: VarId) -> VarId {
        let input = self.value(x);
        let m = input.cols() as f64;
        let data = (0..input.rows())
            .map(|r| {
                let row = input.row(r);
                let mu = row.iter().sum::<f64>() / m;
                row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m
            })
            .collect();
        let value = Matrix::from_vec(input.rows(), 1, data).expect("sized by construction");
        self.push_unary(Op::VarianceRows(x), x, value)
    }

    /// Max-shifted log-sum-exp of every row, as an `n x 1` column.
    pub fn logsumexp_rows(&mut self, x: VarId) -> VarId {
        let input = self.value(x);
        let data = (0..input.rows()).map(|r| logsumexp(input.row(r))).collect();
        let value = Matrix::from_vec(input.rows(), 1, data).expect("sized by construction");
        self.push_unary(Op::LogSumExpRows(x), x, value)
    }

    pub fn negate(&mut self, x: VarId) -> VarId {
        let value = self.value(x).scale(-1.0);
        self.push_unary(Op::Negate(x), x, value)
    }

    /// `max(x, c)` element-wise. Backward passes gradient only where
    /// `x > c`; entries at exactly `x == c` get zero.
    pub fn clamp_min(&mut self, x: VarId, c: f64) -> VarId {
        let value = self.value(x).map(|v| v.max(c));
        self.push_unary(Op::ClampMin(x, c), x, value)
    }

    pub fn square(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| v * v);
        self.push_unary(Op::Square(x), x, value)
    }

    /// Output row `p` is input row `indices[p]`; duplicates allowed.
    /// Backward scatter-adds, so a row gathered `k` times accumulates `k`
    /// gradient contributions.
    pub fn gather_rows(&mut self, x: VarId, indices: &[usize]) -> Result<VarId> {
        let input = self.value(x);
        let cols = input.cols();
        let mut value = Matrix::zeros(indices.len(), cols);
        for (p, &src) in indices.iter().enumerate() {
            if src >= input.rows() {
                return Err(Error::shape(
                    "gather-rows",
                    format!("index {src} out of range for {} rows", input.rows()),
                ));
            }
            value.row_mut(p).copy_from_slice(input.row(src));
        }
        Ok(self.push_unary(Op::GatherRows(x, indices.to_vec()), x, value))
    }

    /// Reinterprets the row-major buffer with a new shape of equal size.
    pub fn reshape(&mut self, x: VarId, rows: usize, cols: usize) -> Result<VarId> {
        let input = self.value(x);
        if input.rows() * input.cols() != rows * cols {
            return Err(Error::shape(
                "reshape",
                format!("{:?} into {}x{}", input.shape(), rows, cols),
            ));
        }
        let value = Matrix::from_vec(rows, cols, input.data().to_vec())?;
        Ok(self.push_unary(Op::Reshape(x), x, value))
    }

    pub fn transpose(&mut self, x: VarId) -> VarId {
        let value = self.value(x).transpose();
        self.push_unary(Op::Transpose(x), x, value)
    }

    /// Scales every row to unit Euclidean norm. Rows whose norm falls below
    /// the floor become zero rows and pass no gradient, so callers that
    /// exclude such rows see consistent forward and backward behavior.
    pub fn normalize_rows(&mut self, x: VarId) -> VarId {
        let input = self.value(x);
        let (n, m) = input.shape();
        let mut value = Matrix::zeros(n, m);
        for r in 0..n {
            let row = input.row(r);
            let norm = l2_norm(row);
            if norm > DELTA_NORM {
                for (o, &v) in value.row_mut(r).iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        self.push_unary(Op::NormalizeRows(x), x, value)
    }

    /// Exact reverse-mode gradients of the scalar `root` with respect to
    /// every node that requires them. Visits each tape entry at most once,
    /// in reverse topological order; subtrees that do not require gradients
    /// are skipped entirely.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot {
                rows: root_value.rows(),
                cols: root_value.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Matrix::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.apply_backward(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { by_node: grads })
    }

    fn apply_backward(
        &self,
        i: usize,
        gout: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let db = gout.matmul(&self.value(*b).transpose())?;
                    accumulate(grads, *a, db);
                }
                if self.requires_grad(*b) {
                    let da = self.value(*a).transpose().matmul(gout)?;
                    accumulate(grads, *b, da);
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, gout.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, gout.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, gout.hadamard(self.value(*b))?);
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, gout.hadamard(self.value(*a))?);
                }
            }
            Op::ScalarMul(x, k) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, gout.scale(*k));
                }
            }
            Op::RowSoftmax(x) => {
                if self.requires_grad(*x) {
                    let y = &node.value;
                    let (n, m) = y.shape();
                    let mut dx = Matrix::zeros(n, m);
                    for r in 0..n {
                        let (yr, gr) = (y.row(r), gout.row(r));
                        let inner = dot(gr, yr);
                        for j in 0..m {
                            dx.set(r, j, yr[j] * (gr[j] - inner));
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Exp(x) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, gout.hadamard(&node.value)?);
                }
            }
            Op::Log(x) => {
                if self.requires_grad(*x) {
                    let input = self.value(*x);
                    accumulate(grads, *x, gout.hadamard(&input.map(|v| 1.0 / v))?);
                }
            }
            Op::L2NormRows(x) => {
                if self.requires_grad(*x) {
                    let input = self.value(*x);
                    let (n, m) = input.shape();
                    let mut dx = Matrix::zeros(n, m);
                    for r in 0..n {
                        let norm = node.value.get(r, 0);
                        if norm == 0.0 {
                            continue;
                        }
                        let g = gout.get(r, 0);
                        for (o, &v) in dx.row_mut(r).iter_mut().zip(input.row(r)) {
                            *o = g * v / norm;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::CosineRows(a, b) => {
                let (ma, mb) = (self.value(*a), self.value(*b));
                let (n, m) = ma.shape();
                let mut da = Matrix::zeros(n, m);
                let mut db = Matrix::zeros(n, m);
                for r in 0..n {
                    let (ra, rb) = (ma.row(r), mb.row(r));
                    let (na, nb) = (l2_norm(ra), l2_norm(rb));
                    let c = node.value.get(r, 0);
                    let g = gout.get(r, 0);
                    for j in 0..m {
                        da.set(r, j, g * (rb[j] / (na * nb) - c * ra[j] / (na * na)));
                        db.set(r, j, g * (ra[j] / (na * nb) - c * rb[j] / (nb * nb)));
                    }
                }
                if self.requires_grad(*a) {
                    accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Mean(x) => {
                if self.requires_grad(*x) {
                    let input = self.value(*x);
                    let (n, m) = input.shape();
                    let g = gout.scalar_value() / (n * m) as f64;
                    accumulate(grads, *x, Matrix::filled(n, m, g));
                }
            }
            Op::VarianceRows(x) => {
                if self.requires_grad(*x) {
                    let input = self.value(*x);
                    let (n, m) = input.shape();
                    let mut dx = Matrix::zeros(n, m);
                    for r in 0..n {
                        let row = input.row(r);
                        let mu = row.iter().sum::<f64>() / m as f64;
                        let g = gout.get(r, 0);
                        for (o, &v) in dx.row_mut(r).iter_mut().zip(row) {
                            *o = g * 2.0 * (v - mu) / m as f64;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LogSumExpRows(x) => {
                if self.requires_grad(*x) {
                    let input = self.value(*x);
                    let (n, m) = input.shape();
                    let mut dx = Matrix::zeros(n, m);
                    for r in 0..n {
                        let lse = node.value.get(r, 0);
                        let g = gout.get(r, 0);
                        for (o, &v) in dx.row_mut(r).iter_mut().zip(input.row(r)) {
                            *o = g * (v - lse).exp();
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Negate(x) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, gout.scale(-1.0));
                }
            }
            Op::ClampMin(x, c) => {
                if self.requires_grad(*x) {
                    let input = self.value(*x);
                    let mask = input.map(|v| if v > *c { 1.0 } else { 0.0 });
                    accumulate(grads, *x, gout.hadamard(&mask)?);
                }
            }
            Op::Square(x) => {
                if self.requires_grad(*x) {
                    let two_x = self.value(*x).scale(2.0);
                    accumulate(grads, *x, gout.hadamard(&two_x)?);
                }
            }
            Op::GatherRows(x, indices) => {
                if self.requires_grad(*x) {
                    let input = self.value(*x);
                    let mut dx = Matrix::zeros(input.rows(), input.cols());
                    for (p, &src) in indices.iter().enumerate() {
                        for (o, &g) in dx.row_mut(src).iter_mut().zip(gout.row(p)) {
                            *o += g;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x) => {
                if self.requires_grad(*x) {
                    let (r, c) = self.value(*x).shape();
                    let dx = Matrix::from_vec(r, c, gout.data().to_vec())?;
                    accumulate(grads, *x, dx);
                }
            }
            Op::Transpose(x) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, gout.transpose());
                }
            }
            Op::NormalizeRows(x) => {
                if self.requires_grad(*x) {
                    let input = self.value(*x);
                    let (n, m) = input.shape();
                    let mut dx = Matrix::zeros(n, m);
                    for r in 0..n {
                        let norm = l2_norm(input.row(r));
                        if norm <= DELTA_NORM {
                            continue;
                        }
                        let z = node.value.row(r);
                        let g = gout.row(r);
                        let inner = dot(g, z);
                        for j in 0..m {
                            dx.set(r, j, (g[j] - inner * z[j]) / norm);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: VarId, delta: Matrix) {
    match &mut grads[id.0] {
        Some(g) => {
            for (o, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                *o += d;
            }
        }
        slot => *slot = Some(delta),
    }
}

/// Max-shifted softmax of one row.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Max-shifted log-sum-exp of one row.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_with_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let zero = tape.constant(Matrix::zeros(2, 2));
        let y = tape.add(x, zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn softmax_of_uniform_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(1, 4, 3.7));
        let y = tape.row_softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn logsumexp_of_two_zeros_is_log_two() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(1, 2));
        let y = tape.logsumexp_rows(x);
        assert!((tape.value(y).scalar_value() - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[vec![100.0, -100.0]]).unwrap());
        let y = tape.logsumexp_rows(x);
        let got = tape.value(y).scalar_value();
        assert!(got.is_finite());
        assert!((got - 100.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_form_gradient_is_other_factor() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let y = tape.constant(Matrix::from_rows(&[vec![4.0, 5.0, 6.0]]).unwrap());
        let yt = tape.transpose(y);
        let root = tape.matmul(x, yt).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn softmax_input_gradient_rows_sum_to_zero() {
        let mut tape = Tape::new();
        let x = tape.param(
            Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![5.0, 5.5, -0.2]]).unwrap(),
        );
        let s = tape.row_softmax(x);
        let w = tape.constant(Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 1.0, 3.0]]).unwrap());
        let weighted = tape.mul(s, w).unwrap();
        let root = tape.mean(weighted);
        let grads = tape.backward(root).unwrap();
        let dx = grads.get(x).unwrap();
        for r in 0..2 {
            let sum: f64 = dx.row(r).iter().sum();
            assert!(sum.abs() < 1e-15, "row {r} grad sum {sum}");
        }
    }

    #[test]
    fn gathered_row_accumulates_gradient_per_use() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let g = tape.gather_rows(x, &[0, 0, 1]).unwrap();
        let root = tape.mean(g);
        let grads = tape.backward(root).unwrap();
        let dx = grads.get(x).unwrap();
        assert!((dx.get(0, 0) - 2.0 / 6.0).abs() < 1e-15);
        assert!((dx.get(1, 0) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn constant_subtrees_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::scalar(2.0));
        let c = tape.constant(Matrix::scalar(5.0));
        let prod = tape.mul(x, c).unwrap();
        let root = tape.mean(prod);
        let grads = tape.backward(root).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().scalar_value(), 5.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 3));
        let y = tape.exp(x);
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarRoot { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn clamp_min_blocks_gradient_below_and_at_threshold() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap());
        let y = tape.clamp_min(x, 0.0);
        let root = tape.mean(y);
        let grads = tape.backward(root).unwrap();
        let dx = grads.get(x).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn gather_rejects_out_of_range_index() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 2));
        assert!(tape.gather_rows(x, &[0, 2]).is_err());
    }

    #[test]
    fn reshape_rejects_size_change() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 3));
        assert!(tape.reshape(x, 4, 2).is_err());
        assert!(tape.reshape(x, 3, 2).is_ok());
    }

    #[test]
    fn cosine_rows_rejects_degenerate_row() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let b = tape.param(Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let err = tape.cosine_rows(a, b).unwrap_err();
        assert!(matches!(err, Error::DegenerateNorm { .. }));
    }

    #[test]
    fn normalize_rows_zeroes_degenerate_rows() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap());
        let z = tape.normalize_rows(x);
        assert_eq!(tape.value(z).row(0), &[0.6, 0.8]);
        assert_eq!(tape.value(z).row(1), &[0.0, 0.0]);
        let ones = tape.constant(Matrix::filled(2, 2, 1.0));
        let w = tape.mul(z, ones).unwrap();
        let root = tape.mean(w);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().row(1), &[0.0, 0.0]);
    }
}
