//! Dense real matrix arithmetic and the symmetric factorizations used by the
//! rest of the crate: Cholesky, log-determinant, SPD inverse, a cyclic Jacobi
//! eigensolver and a Newton–Schulz matrix square root.
//!
//! Storage is dense row-major `f64`; the target problems stay well under a
//! thousand features, so no sparse formats are provided. All operations are
//! pure functions on immutable inputs.

use thiserror::Error;

/// Errors raised by the dense linear-algebra kernels.
#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric (|A[{i}][{j}] - A[{j}][{i}]| = {delta:.3e})")]
    NotSymmetric { i: usize, j: usize, delta: f64 },
    #[error("iteration did not converge within {limit} {unit}")]
    NoConvergence { limit: usize, unit: &'static str },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Matrix::zeros(entries.len(), entries.len());
        for (i, &e) in entries.iter().enumerate() {
            m.data[i * entries.len() + i] = e;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a 1x1 matrix.
    pub fn as_scalar(&self) -> f64 {
        assert!(self.rows == 1 && self.cols == 1, "not a 1x1 matrix");
        self.data[0]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Dense product `self * other`. Row-major i-k-j kernel; the problem
    /// sizes here are small enough that everything stays in L1.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let m = self.rows;
        let k = self.cols;
        let n = other.cols;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &other.data[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        Matrix {
            rows: m,
            cols: n,
            data: out,
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert!(self.same_shape(other), "add shape mismatch");
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert!(self.same_shape(other), "sub shape mismatch");
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert!(self.same_shape(other), "hadamard shape mismatch");
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert!(self.same_shape(other), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square(), "trace needs a square matrix");
        (0..self.rows).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Frobenius inner product `sum_ij A_ij * B_ij` (equals `tr(A^T B)`).
    pub fn frob_inner(&self, other: &Matrix) -> f64 {
        assert!(self.same_shape(other), "frob_inner shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// `(A + A^T) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square(), "symmetrize needs a square matrix");
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                out.data[i * n + j] = m;
                out.data[j * n + i] = m;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Relative symmetry check: `|A_ij - A_ji| <= tol * max(1, |A_ij|)`.
    pub fn symmetry_violation(&self) -> f64 {
        assert!(self.is_square());
        let n = self.rows;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let a = self.data[i * n + j];
                let b = self.data[j * n + i];
                let rel = (a - b).abs() / a.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
        worst
    }
}

/// Symmetric positive-definite matrix, validated at construction via a
/// symmetry test and a Cholesky factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    m: Matrix,
}

impl SpdMatrix {
    const SYMMETRY_TOL: f64 = 1e-12;

    /// Validates symmetry (`|A_ij - A_ji| <= 1e-12 * max(1, |A_ij|)`) and
    /// positive definiteness (Cholesky succeeds).
    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::ShapeMismatch(format!(
                "SPD matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let n = m.rows();
        for i in 0..n {
            for j in (i + 1)..n {
                let a = m.at(i, j);
                let b = m.at(j, i);
                let delta = (a - b).abs();
                if delta > Self::SYMMETRY_TOL * a.abs().max(1.0) {
                    return Err(LinalgError::NotSymmetric { i, j, delta });
                }
            }
        }
        cholesky_matrix(&m)?;
        Ok(SpdMatrix { m })
    }

    /// Symmetrizes first, then validates positive definiteness. Used after
    /// operations whose output is SPD up to floating-point drift.
    pub fn symmetrized(m: Matrix) -> Result<Self, LinalgError> {
        SpdMatrix::new(m.symmetrized())
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix {
            m: Matrix::identity(dim),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn into_matrix(self) -> Matrix {
        self.m
    }
}

/// Lower-triangular Cholesky factor of a symmetric matrix given as raw
/// `Matrix`. Fails with `NotPositiveDefinite` when a pivot is not positive.
pub fn cholesky_matrix(a: &Matrix) -> Result<Matrix, LinalgError> {
    assert!(a.is_square(), "cholesky needs a square matrix");
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(LinalgError::NotPositiveDefinite { index: i, pivot: s });
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.at(j, j));
            }
        }
    }
    Ok(l)
}

/// Lower-triangular Cholesky factor `L` with `L L^T = A`.
pub fn cholesky(a: &SpdMatrix) -> Matrix {
    cholesky_matrix(a.matrix()).expect("SPD invariant violated in cholesky")
}

/// `log det A = 2 * sum_i log L_ii` from the Cholesky factor.
pub fn log_det_spd(a: &SpdMatrix) -> f64 {
    let l = cholesky(a);
    2.0 * (0..a.dim()).map(|i| l.at(i, i).ln()).sum::<f64>()
}

/// Same as [`log_det_spd`] but on a raw matrix; errors when not PD.
pub fn log_det_matrix(a: &Matrix) -> Result<f64, LinalgError> {
    let l = cholesky_matrix(a)?;
    Ok(2.0 * (0..a.rows()).map(|i| l.at(i, i).ln()).sum::<f64>())
}

/// Inverse via the Cholesky factor, explicitly symmetrized.
pub fn spd_inverse(a: &SpdMatrix) -> SpdMatrix {
    let inv = spd_inverse_matrix(a.matrix()).expect("SPD invariant violated in spd_inverse");
    SpdMatrix::symmetrized(inv).expect("inverse of SPD matrix must be SPD")
}

/// Inverse of a raw symmetric positive-definite matrix (symmetrized output).
pub fn spd_inverse_matrix(a: &Matrix) -> Result<Matrix, LinalgError> {
    let n = a.rows();
    let l = cholesky_matrix(a)?;
    // Solve L Y = I column by column, then L^T X = Y.
    let mut inv = Matrix::zeros(n, n);
    let mut y = vec![0.0; n];
    let mut x = vec![0.0; n];
    for col in 0..n {
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l.at(i, k) * y[k];
            }
            y[i] = s / l.at(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l.at(k, i) * x[k];
            }
            x[i] = s / l.at(i, i);
            inv.set(i, col, x[i]);
        }
    }
    Ok(inv.symmetrized())
}

const JACOBI_SWEEP_BUDGET: usize = 100;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns, so `A = V diag(w) V^T`. The input is symmetrized
/// internally before sweeping.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    assert!(a.is_square(), "sym_eig needs a square matrix");
    let n = a.rows();
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let mut work = a.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = work.frob_norm().max(f64::MIN_POSITIVE);
    let target = 1e-14 * scale;

    let mut converged = false;
    for _sweep in 0..JACOBI_SWEEP_BUDGET {
        let mut off_sq = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let x = work.at(p, q);
                off_sq += 2.0 * x * x;
            }
        }
        if off_sq.sqrt() <= target {
            converged = true;
            break;
        }
        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                jacobi_rotate(&mut work, &mut v, p, q);
            }
        }
    }
    if !converged {
        // One last check: the final sweep may have finished the job.
        let mut off_sq = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let x = work.at(p, q);
                off_sq += 2.0 * x * x;
            }
        }
        if off_sq.sqrt() > target {
            return Err(LinalgError::NoConvergence {
                limit: JACOBI_SWEEP_BUDGET,
                unit: "Jacobi sweeps",
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| work.at(i, i)).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).expect("NaN eigenvalue"));
    let w: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_col, v.at(r, old_col));
        }
    }
    Ok((w, vectors))
}

fn jacobi_rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a.at(p, q);
    if apq == 0.0 {
        return;
    }
    let app = a.at(p, p);
    let aqq = a.at(q, q);
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        1.0 / (tau - (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let n = a.rows();

    for k in 0..n {
        let akp = a.at(k, p);
        let akq = a.at(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.at(p, k);
        let aqk = a.at(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    // Clean the rotated pair exactly; the 2x2 subproblem is solved.
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.at(k, p);
        let vkq = v.at(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

pub const SQRT_NEWTON_CAP: usize = 25;

/// Principal square root of an SPD matrix.
///
/// Runs the scaled Newton–Schulz coupled iteration (pre-scaled by the trace,
/// capped at 25 steps, converged when `||B B - A||_F / ||A||_F < 1e-9`) and
/// falls back to the eigendecomposition route when the cap is hit.
pub fn matrix_sqrt_spd(a: &SpdMatrix) -> Result<SpdMatrix, LinalgError> {
    let m = a.matrix();
    let norm_a = m.frob_norm().max(f64::MIN_POSITIVE);
    if let Some(b) = newton_schulz_sqrt(m, SQRT_NEWTON_CAP, 1e-9 * norm_a) {
        return SpdMatrix::symmetrized(b);
    }
    // Cap hit: eigendecomposition route.
    let (w, v) = sym_eig(m)?;
    let mut scaled = v.clone();
    for (j, wj) in w.iter().enumerate() {
        let root = wj.max(0.0).sqrt();
        for i in 0..m.rows() {
            scaled.set(i, j, scaled.at(i, j) * root);
        }
    }
    let b = scaled.matmul(&v.transpose());
    SpdMatrix::symmetrized(b)
}

/// Newton–Schulz sqrt on a raw SPD matrix; `None` when the residual target
/// is not met within `cap` iterations.
fn newton_schulz_sqrt(a: &Matrix, cap: usize, abs_tol: f64) -> Option<Matrix> {
    let n = a.rows();
    let c = a.trace();
    if !(c > 0.0) {
        return None;
    }
    let sqrt_c = c.sqrt();
    let mut y = a.scale(1.0 / c);
    let mut z = Matrix::identity(n);
    let eye3 = Matrix::identity(n).scale(3.0);
    for _ in 0..=cap {
        let b = y.scale(sqrt_c);
        if b.matmul(&b).sub(a).frob_norm() < abs_tol {
            return Some(b);
        }
        let t = eye3.sub(&z.matmul(&y));
        let y_next = y.matmul(&t).scale(0.5);
        let z_next = t.matmul(&z).scale(0.5);
        y = y_next;
        z = z_next;
    }
    None
}
