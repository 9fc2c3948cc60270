//! Minimal reverse-mode automatic differentiation over the matrix and scalar
//! operations used by the unrolled network.
//!
//! Values are recorded eagerly on a [`Tape`] in single-assignment order, so
//! creation order is already a topological order and the backward sweep is a
//! single reverse pass. Scalars are represented as 1x1 matrices. A tape is
//! confined to one fit and rebuilt every epoch; independent fits each own a
//! private tape.

use crate::linalg::{cholesky_matrix, spd_inverse_matrix, LinalgError, Matrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// scalar * matrix, scalar is a 1x1 node
    ScalarMul(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    AbsSmooth(NodeId),
    /// Frobenius inner product `sum_ij A_ij B_ij` (for symmetric operands
    /// this equals `tr(A B)`)
    TraceInner(NodeId, NodeId),
    LogDetSpd(NodeId),
    /// entrywise `sign(x) * max(|x| - tau, 0)`; the gradient at the kink
    /// takes the thresholded side (zero)
    SoftThreshold(NodeId, NodeId),
    Sum(NodeId),
    FrobSq(NodeId),
    /// scalar reciprocal
    Recip(NodeId),
    /// W * X + b broadcast over columns
    Affine {
        weight: NodeId,
        input: NodeId,
        bias: NodeId,
    },
    /// (A + A^T) / 2
    Sym(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], addressed by node id.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `id`, `None` when no path from the loss reached it.
    pub fn wrt(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Dense gradient for `id`; exactly zero when untouched by the sweep.
    pub fn wrt_dense(&self, tape: &Tape, id: NodeId) -> Matrix {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => {
                let v = tape.value(id);
                Matrix::zeros(v.rows(), v.cols())
            }
        }
    }
}

/// Reverse-mode tape: an append-only record of the forward computation.
#[derive(Default)]
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.as_scalar()
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Matrix::scalar(value))
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn record(&mut self, value: Matrix, op: Op) -> NodeId {
        let requires = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::ScalarMul(a, b)
            | Op::Hadamard(a, b)
            | Op::TraceInner(a, b)
            | Op::SoftThreshold(a, b) => self.needs(*a) || self.needs(*b),
            Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::AbsSmooth(a)
            | Op::LogDetSpd(a)
            | Op::Sum(a)
            | Op::FrobSq(a)
            | Op::Recip(a)
            | Op::Sym(a) => self.needs(*a),
            Op::Affine { weight, input, bias } => {
                self.needs(*weight) || self.needs(*input) || self.needs(*bias)
            }
        };
        self.push(value, op, requires)
    }

    fn shape_err(op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch { op, detail }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Self::shape_err(
                "matmul",
                format!("{}x{} * {}x{}", va.rows(), va.cols(), vb.rows(), vb.cols()),
            ));
        }
        let value = va.matmul(vb);
        Ok(self.record(value, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_same_shape(a, b, "add", |x, y| x.add(y), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_same_shape(a, b, "subtract", |x, y| x.sub(y), Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_same_shape(a, b, "elementwise-multiply", |x, y| x.hadamard(y), Op::Hadamard(a, b))
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(&Matrix, &Matrix) -> Matrix,
        op: Op,
    ) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Self::shape_err(
                name,
                format!("{}x{} vs {}x{}", va.rows(), va.cols(), vb.rows(), vb.cols()),
            ));
        }
        let value = f(va, vb);
        Ok(self.record(value, op))
    }

    /// `scalar * matrix`; the scalar operand must be 1x1.
    pub fn scalar_mul(&mut self, scalar: NodeId, matrix: NodeId) -> Result<NodeId, AutodiffError> {
        let vs = self.value(scalar);
        if vs.rows() != 1 || vs.cols() != 1 {
            return Err(Self::shape_err(
                "scalar-multiply",
                format!("scalar operand is {}x{}", vs.rows(), vs.cols()),
            ));
        }
        let s = vs.as_scalar();
        let value = self.value(matrix).scale(s);
        Ok(self.record(value, Op::ScalarMul(scalar, matrix)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.record(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.record(value, Op::Sigmoid(a))
    }

    pub fn abs_smooth(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        self.record(value, Op::AbsSmooth(a))
    }

    /// Frobenius inner product, a 1x1 result.
    pub fn trace_inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Self::shape_err(
                "trace-inner-product",
                format!("{}x{} vs {}x{}", va.rows(), va.cols(), vb.rows(), vb.cols()),
            ));
        }
        let value = Matrix::scalar(va.frob_inner(vb));
        Ok(self.record(value, Op::TraceInner(a, b)))
    }

    /// `log det` of an SPD operand, a 1x1 result. The operand is symmetrized
    /// before factorization.
    pub fn log_det_spd(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if !va.is_square() {
            return Err(Self::shape_err(
                "log-det-spd",
                format!("{}x{}", va.rows(), va.cols()),
            ));
        }
        let sym = va.symmetrized();
        let l = cholesky_matrix(&sym)?;
        let ld = 2.0 * (0..sym.rows()).map(|i| l.at(i, i).ln()).sum::<f64>();
        Ok(self.record(Matrix::scalar(ld), Op::LogDetSpd(a)))
    }

    /// Entrywise soft threshold of `x` by `tau` (same shape).
    pub fn soft_threshold(&mut self, x: NodeId, tau: NodeId) -> Result<NodeId, AutodiffError> {
        let (vx, vt) = (self.value(x), self.value(tau));
        if !vx.same_shape(vt) {
            return Err(Self::shape_err(
                "soft-threshold",
                format!("{}x{} vs {}x{}", vx.rows(), vx.cols(), vt.rows(), vt.cols()),
            ));
        }
        let value = vx.zip_threshold(vt);
        Ok(self.record(value, Op::SoftThreshold(x, tau)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).sum());
        self.record(value, Op::Sum(a))
    }

    pub fn frob_sq(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).frob_norm_sq());
        self.record(value, Op::FrobSq(a))
    }

    /// Scalar reciprocal of a 1x1 node.
    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if va.rows() != 1 || va.cols() != 1 {
            return Err(Self::shape_err(
                "reciprocal",
                format!("{}x{}", va.rows(), va.cols()),
            ));
        }
        let value = Matrix::scalar(1.0 / va.as_scalar());
        Ok(self.record(value, Op::Recip(a)))
    }

    /// `W * X + b` with the bias column broadcast over the columns of `X`.
    pub fn affine(&mut self, weight: NodeId, input: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (vw, vx, vb) = (self.value(weight), self.value(input), self.value(bias));
        if vw.cols() != vx.rows() || vb.rows() != vw.rows() || vb.cols() != 1 {
            return Err(Self::shape_err(
                "affine-map",
                format!(
                    "W {}x{}, X {}x{}, b {}x{}",
                    vw.rows(),
                    vw.cols(),
                    vx.rows(),
                    vx.cols(),
                    vb.rows(),
                    vb.cols()
                ),
            ));
        }
        let mut value = vw.matmul(vx);
        for i in 0..value.rows() {
            let bi = vb.at(i, 0);
            for j in 0..value.cols() {
                value.set(i, j, value.at(i, j) + bi);
            }
        }
        Ok(self.record(value, Op::Affine { weight, input, bias }))
    }

    /// `(A + A^T) / 2`; keeps SPD iterates symmetric across long chains.
    pub fn sym(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if !va.is_square() {
            return Err(Self::shape_err(
                "symmetrize",
                format!("{}x{}", va.rows(), va.cols()),
            ));
        }
        let value = va.symmetrized();
        Ok(self.record(value, Op::Sym(a)))
    }

    /// Reverse sweep from a scalar loss node. Panics if `loss` is not 1x1
    /// (graph construction guarantees validity for well-formed callers).
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let lv = self.value(loss);
        assert!(
            lv.rows() == 1 && lv.cols() == 1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Matmul(a, b) => {
                    if self.needs(*a) {
                        let delta = g.matmul(&self.value(*b).transpose());
                        accumulate(&mut grads, a.0, delta);
                    }
                    if self.needs(*b) {
                        let delta = self.value(*a).transpose().matmul(&g);
                        accumulate(&mut grads, b.0, delta);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, g.scale(-1.0));
                    }
                }
                Op::ScalarMul(s, m) => {
                    if self.needs(*s) {
                        let delta = Matrix::scalar(g.frob_inner(self.value(*m)));
                        accumulate(&mut grads, s.0, delta);
                    }
                    if self.needs(*m) {
                        let sv = self.value(*s).as_scalar();
                        accumulate(&mut grads, m.0, g.scale(sv));
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, g.hadamard(self.value(*b)));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, g.hadamard(self.value(*a)));
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let delta = g.zip_map_pub(y, |gi, yi| gi * (1.0 - yi * yi));
                    accumulate(&mut grads, a.0, delta);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let delta = g.zip_map_pub(y, |gi, yi| gi * yi * (1.0 - yi));
                    accumulate(&mut grads, a.0, delta);
                }
                Op::AbsSmooth(a) => {
                    let x = self.value(*a);
                    let delta = g.zip_map_pub(x, |gi, xi| gi * sign_or_zero(xi));
                    accumulate(&mut grads, a.0, delta);
                }
                Op::TraceInner(a, b) => {
                    let gs = g.as_scalar();
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, self.value(*b).scale(gs));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, self.value(*a).scale(gs));
                    }
                }
                Op::LogDetSpd(a) => {
                    let gs = g.as_scalar();
                    let inv = spd_inverse_matrix(&self.value(*a).symmetrized())
                        .expect("log-det operand stayed SPD during forward");
                    accumulate(&mut grads, a.0, inv.scale(gs));
                }
                Op::SoftThreshold(x, tau) => {
                    let vx = self.value(*x);
                    let vt = self.value(*tau);
                    if self.needs(*x) {
                        let delta = Matrix::from_fn(vx.rows(), vx.cols(), |i, j| {
                            if vx.at(i, j).abs() > vt.at(i, j) {
                                g.at(i, j)
                            } else {
                                0.0
                            }
                        });
                        accumulate(&mut grads, x.0, delta);
                    }
                    if self.needs(*tau) {
                        let delta = Matrix::from_fn(vx.rows(), vx.cols(), |i, j| {
                            if vx.at(i, j).abs() > vt.at(i, j) {
                                -g.at(i, j) * sign_or_zero(vx.at(i, j))
                            } else {
                                0.0
                            }
                        });
                        accumulate(&mut grads, tau.0, delta);
                    }
                }
                Op::Sum(a) => {
                    let gs = g.as_scalar();
                    let v = self.value(*a);
                    accumulate(&mut grads, a.0, Matrix::filled(v.rows(), v.cols(), gs));
                }
                Op::FrobSq(a) => {
                    let gs = g.as_scalar();
                    accumulate(&mut grads, a.0, self.value(*a).scale(2.0 * gs));
                }
                Op::Recip(a) => {
                    let gs = g.as_scalar();
                    let x = self.value(*a).as_scalar();
                    accumulate(&mut grads, a.0, Matrix::scalar(-gs / (x * x)));
                }
                Op::Affine { weight, input, bias } => {
                    if self.needs(*weight) {
                        let delta = g.matmul(&self.value(*input).transpose());
                        accumulate(&mut grads, weight.0, delta);
                    }
                    if self.needs(*input) {
                        let delta = self.value(*weight).transpose().matmul(&g);
                        accumulate(&mut grads, input.0, delta);
                    }
                    if self.needs(*bias) {
                        let mut delta = Matrix::zeros(g.rows(), 1);
                        for i in 0..g.rows() {
                            let mut s = 0.0;
                            for j in 0..g.cols() {
                                s += g.at(i, j);
                            }
                            delta.set(i, 0, s);
                        }
                        accumulate(&mut grads, bias.0, delta);
                    }
                }
                Op::Sym(a) => {
                    accumulate(&mut grads, a.0, g.symmetrized());
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, delta: Matrix) {
    match &mut grads[idx] {
        Some(g) => g.axpy(1.0, &delta),
        slot @ None => *slot = Some(delta),
    }
}

#[inline]
fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Matrix {
    fn zip_threshold(&self, tau: &Matrix) -> Matrix {
        Matrix::from_fn(self.rows(), self.cols(), |i, j| {
            let x = self.at(i, j);
            let t = tau.at(i, j);
            sign_or_zero(x) * (x.abs() - t).max(0.0)
        })
    }

    /// Exposed for adjoint computations in this module.
    fn zip_map_pub(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert!(self.same_shape(other));
        Matrix::from_fn(self.rows(), self.cols(), |i, j| f(self.at(i, j), other.at(i, j)))
    }
}

/// Compares the tape gradient of a scalar-valued graph against central
/// finite differences, coordinate by coordinate.
///
/// `build` must deterministically construct the loss from leaves created in
/// the order of `params`. Returns the worst relative discrepancy, where each
/// coordinate's error is `|fd - ad| / max(|fd|, |ad|, 0.01)`; the floor keeps
/// genuinely tiny gradients from inflating the ratio while sign flips in
/// small entries still register.
pub fn finite_difference_check<F>(build: F, params: &[Matrix], h: f64) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    assert!(h > 0.0, "step must be positive");
    let eval = |values: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.scalar_value(loss)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss);

    let mut worst: f64 = 0.0;
    let mut work: Vec<Matrix> = params.to_vec();
    for (p, id) in ids.iter().enumerate() {
        let analytic = grads.wrt_dense(&tape, *id);
        for i in 0..params[p].rows() {
            for j in 0..params[p].cols() {
                let base = params[p].at(i, j);
                work[p].set(i, j, base + h);
                let up = eval(&work);
                work[p].set(i, j, base - h);
                let down = eval(&work);
                work[p].set(i, j, base);
                let fd = (up - down) / (2.0 * h);
                let ad = analytic.at(i, j);
                let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-2);
                worst = worst.max(err);
            }
        }
    }
    worst
}
