//! Dense row-major matrices and the handful of factorizations the CAW layer needs.
//!
//! Every reduction runs in a fixed order (row-major, ascending index) so results are
//! bit-reproducible across runs.

use std::ops::{Index, IndexMut};

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("eigenvalue {index} plus regularizer is not positive ({value:e})")]
    NotPositive { index: usize, value: f64 },
    #[error("matrix is singular (pivot magnitude {pivot:e} in column {column})")]
    Singular { column: usize, pivot: f64 },
    #[error(
        "Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})"
    )]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Symmetry tolerance accepted by [`sym_eig`] and [`inv_sqrt_psd`].
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Jacobi stops once the off-diagonal Frobenius norm falls below this.
pub const JACOBI_TOL: f64 = 1e-12;
/// Pivots smaller than this make [`solve`] report singularity.
pub const PIVOT_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from `f64` rows; panics on ragged input (test and literal helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend(r.iter().map(|&v| T::of(v)));
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[T]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Largest absolute entry (the entrywise infinity norm).
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Largest `|a_ij - a_ji|`; infinite for non-square input.
    pub fn asymmetry(&self) -> T {
        if !self.is_square() {
            return T::infinity();
        }
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "mul_vec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.rows)
            .map(|i| {
                let mut acc = T::zero();
                for (&a, &b) in self.row(i).iter().zip(v) {
                    acc += a * b;
                }
                acc
            })
            .collect())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Matrix product `a * b`.
///
/// Each output entry accumulates `a_ik * b_kj` for ascending `k` starting from zero,
/// so the result is bitwise equal to the textbook triple loop.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(c)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.cols {
        let out = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.rows {
            let aki = a.data[k * a.cols + i];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymEig<T> {
    /// Sorted descending.
    pub eigenvalues: Vec<T>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: Matrix<T>,
}

impl<T: Scalar> SymEig<T> {
    /// `V * diag(f(λ)) * Vᵀ`, mirrored so the result is exactly symmetric.
    pub fn reconstruct_with(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let weights: Vec<T> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = T::zero();
                for (k, &w) in weights.iter().enumerate() {
                    acc += v[(i, k)] * w * v[(j, k)];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        self.reconstruct_with(|l| l)
    }
}

fn off_diagonal_norm<T: Scalar>(a: &Matrix<T>) -> T {
    let mut acc = T::zero();
    for i in 0..a.rows {
        for j in 0..a.cols {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps stop when the off-diagonal Frobenius norm drops below [`JACOBI_TOL`]
/// (or below machine precision relative to `‖S‖_F`, whichever is larger).
pub fn sym_eig<T: Scalar>(s: &Matrix<T>) -> Result<SymEig<T>> {
    if !s.is_square() {
        return Err(LinalgError::NotSquare {
            op: "sym_eig",
            rows: s.rows,
            cols: s.cols,
        });
    }
    let asym = s.asymmetry();
    if asym > T::of(SYMMETRY_TOL) || asym.is_nan() {
        return Err(LinalgError::NotSymmetric {
            asymmetry: asym.as_f64(),
        });
    }
    let n = s.rows;
    let mut a = s.clone();
    // Symmetrize so rotations act on an exactly symmetric matrix.
    for i in 0..n {
        for j in i + 1..n {
            let m = (a[(i, j)] + a[(j, i)]) * T::of(0.5);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    let mut v = Matrix::identity(n);
    let tol = T::of(JACOBI_TOL).max(T::epsilon() * T::of(4.0) * s.frobenius());

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) < tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (T::of(2.0) * apq);
                let t = if tau >= T::zero() {
                    T::one() / (tau + (T::one() + tau * tau).sqrt())
                } else {
                    -T::one() / (-tau + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let sn = t * c;
                // A <- Jᵀ A J, J the (p, q) plane rotation.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let residual = off_diagonal_norm(&a);
        if residual >= tol {
            return Err(LinalgError::NoConvergence {
                sweeps: MAX_SWEEPS,
                residual: residual.as_f64(),
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in index order.
    order.sort_by(|&i, &j| {
        a[(j, j)]
            .partial_cmp(&a[(i, i)])
            .expect("finite eigenvalues")
    });
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// `(S + eps·I)^{-1/2}` for symmetric positive semi-definite `S`.
pub fn inv_sqrt_psd<T: Scalar>(s: &Matrix<T>, eps: T) -> Result<Matrix<T>> {
    let eig = sym_eig(s)?;
    for (index, &l) in eig.eigenvalues.iter().enumerate() {
        let shifted = l + eps;
        if !(shifted > T::zero()) {
            return Err(LinalgError::NotPositive {
                index,
                value: shifted.as_f64(),
            });
        }
    }
    Ok(eig.reconstruct_with(|l| T::one() / (l + eps).sqrt()))
}

/// Solves `a * x = b` by LU factorization with partial pivoting.
pub fn solve<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            op: "solve",
            rows: a.rows,
            cols: a.cols,
        });
    }
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "solve",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let n = a.rows;
    let m = b.cols;
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_mag = lu[(col, col)].abs();
        for r in col + 1..n {
            let mag = lu[(r, col)].abs();
            if mag > pivot_mag {
                pivot_row = r;
                pivot_mag = mag;
            }
        }
        if !(pivot_mag >= T::of(PIVOT_TOL)) {
            return Err(LinalgError::Singular {
                column: col,
                pivot: pivot_mag.as_f64(),
            });
        }
        if pivot_row != col {
            for k in 0..n {
                lu.data.swap(col * n + k, pivot_row * n + k);
            }
            for k in 0..m {
                x.data.swap(col * m + k, pivot_row * m + k);
            }
        }
        let pivot = lu[(col, col)];
        for r in col + 1..n {
            let factor = lu[(r, col)] / pivot;
            if factor == T::zero() {
                continue;
            }
            lu[(r, col)] = T::zero();
            for k in col + 1..n {
                let v = lu[(col, k)];
                lu[(r, k)] -= factor * v;
            }
            for k in 0..m {
                let v = x[(col, k)];
                x[(r, k)] -= factor * v;
            }
        }
    }
    for col in (0..n).rev() {
        let pivot = lu[(col, col)];
        for k in 0..m {
            let mut acc = x[(col, k)];
            for j in col + 1..n {
                acc -= lu[(col, j)] * x[(j, k)];
            }
            x[(col, k)] = acc / pivot;
        }
    }
    Ok(x)
}
