//! ZCA whitening `ψ(Z) = W (Z − μ 1ᵀ)` with batch and running statistics.
//!
//! Feature maps are flattened to `d × n` with `n = b·h·w`; column
//! `b·(h·w) + i·w + j` holds pixel `(i, j)` of image `b`.

use thiserror::Error;

use crate::linalg::{inv_sqrt_psd, LinalgError, Matrix};
use crate::tensor::FeatureTensor;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WhiteningError {
    #[error("whitening expects {expected} feature rows, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cannot compute statistics of an empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, WhiteningError>;

/// Which statistics a whitening call uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

pub fn flatten<T: Scalar>(z: &FeatureTensor<T>) -> Matrix<T> {
    let [b, d, h, w] = z.shape();
    let hw = h * w;
    let n = b * hw;
    let mut out = Matrix::zeros(d, n);
    for bi in 0..b {
        for c in 0..d {
            let src = &z.as_slice()[z.offset(bi, c, 0, 0)..][..hw];
            out.row_mut(c)[bi * hw..(bi + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Scalar>(
    zf: &Matrix<T>,
    batch: usize,
    height: usize,
    width: usize,
) -> std::result::Result<FeatureTensor<T>, crate::tensor::ShapeError> {
    let hw = height * width;
    if zf.cols() != batch * hw {
        return Err(crate::tensor::ShapeError {
            expected: vec![batch * hw],
            actual: vec![zf.cols()],
        });
    }
    let d = zf.rows();
    let mut z = FeatureTensor::zeros(batch, d, height, width);
    for bi in 0..batch {
        for c in 0..d {
            let o = z.offset(bi, c, 0, 0);
            z.as_mut_slice()[o..o + hw].copy_from_slice(&zf.row(c)[bi * hw..(bi + 1) * hw]);
        }
    }
    Ok(z)
}

/// Column mean and population covariance `(1/n)(Z−μ)(Z−μ)ᵀ`.
pub fn batch_stats<T: Scalar>(zf: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
    let (d, n) = zf.shape();
    if n == 0 {
        return Err(WhiteningError::EmptyBatch);
    }
    let inv_n = T::one() / T::of_usize(n);
    let mean: Vec<T> = (0..d)
        .map(|c| zf.row(c).iter().copied().sum::<T>() * inv_n)
        .collect();
    let centered: Vec<Vec<T>> = (0..d)
        .map(|c| zf.row(c).iter().map(|&v| v - mean[c]).collect())
        .collect();
    let mut cov = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = T::zero();
            for (&a, &b) in centered[i].iter().zip(&centered[j]) {
                acc += a * b;
            }
            let v = acc * inv_n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov))
}

/// Symmetric ZCA whitening matrix `(Σ + eps·I)^{-1/2}`.
pub fn zca_matrix<T: Scalar>(covariance: &Matrix<T>, eps: T) -> Result<Matrix<T>> {
    Ok(inv_sqrt_psd(covariance, eps)?)
}

/// `W (Z − μ 1ᵀ)`.
pub fn apply_whitening<T: Scalar>(w: &Matrix<T>, mean: &[T], zf: &Matrix<T>) -> Result<Matrix<T>> {
    let (d, n) = zf.shape();
    if w.cols() != d || mean.len() != d {
        return Err(WhiteningError::DimensionMismatch {
            expected: w.cols(),
            actual: d,
        });
    }
    let mut out = Matrix::zeros(w.rows(), n);
    for r in 0..w.rows() {
        let dst = out.row_mut(r);
        for c in 0..d {
            let wrc = w[(r, c)];
            if wrc == T::zero() {
                continue;
            }
            let mu = mean[c];
            for (o, &z) in dst.iter_mut().zip(zf.row(c)) {
                *o += wrc * (z - mu);
            }
        }
    }
    Ok(out)
}

/// Whitening statistics of a CAW layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningState<T> {
    /// Latest batch mean μ.
    pub mean: Vec<T>,
    /// Latest batch covariance Σ.
    pub covariance: Matrix<T>,
    /// Latest batch whitening matrix W.
    pub whitening_matrix: Matrix<T>,
    pub running_mean: Vec<T>,
    pub running_covariance: Matrix<T>,
    /// Weight of the old running value in the exponential moving average.
    pub momentum: T,
    pub eps: T,
    running_whitening: Matrix<T>,
}

impl<T: Scalar> WhiteningState<T> {
    /// Fresh state: zero mean, identity covariance.
    pub fn new(dim: usize, momentum: T, eps: T) -> Self {
        let cov = Matrix::identity(dim);
        let w = zca_matrix(&cov, eps).expect("identity is positive definite");
        Self {
            mean: vec![T::zero(); dim],
            covariance: cov.clone(),
            whitening_matrix: w.clone(),
            running_mean: vec![T::zero(); dim],
            running_covariance: cov,
            momentum,
            eps,
            running_whitening: w,
        }
    }

    /// Rebuilds a state from persisted parts, recomputing the eval-time whitening matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        mean: Vec<T>,
        covariance: Matrix<T>,
        whitening_matrix: Matrix<T>,
        running_mean: Vec<T>,
        running_covariance: Matrix<T>,
        momentum: T,
        eps: T,
    ) -> Result<Self> {
        let d = running_mean.len();
        for m in [&covariance, &whitening_matrix, &running_covariance] {
            if m.shape() != (d, d) {
                return Err(WhiteningError::DimensionMismatch {
                    expected: d,
                    actual: m.rows(),
                });
            }
        }
        if mean.len() != d {
            return Err(WhiteningError::DimensionMismatch {
                expected: d,
                actual: mean.len(),
            });
        }
        let running_whitening = zca_matrix(&running_covariance, eps)?;
        Ok(Self {
            mean,
            covariance,
            whitening_matrix,
            running_mean,
            running_covariance,
            momentum,
            eps,
            running_whitening,
        })
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Whitening matrix used in eval mode (derived from the running covariance).
    pub fn running_whitening(&self) -> &Matrix<T> {
        &self.running_whitening
    }

    fn check_dim(&self, zf: &Matrix<T>) -> Result<()> {
        if zf.rows() != self.dim() {
            return Err(WhiteningError::DimensionMismatch {
                expected: self.dim(),
                actual: zf.rows(),
            });
        }
        Ok(())
    }

    /// Dispatches on `mode`; see [`Self::whiten_train`] and [`Self::whiten_eval`].
    pub fn whiten(&mut self, zf: &Matrix<T>, mode: Mode) -> Result<Matrix<T>> {
        match mode {
            Mode::Train => self.whiten_train(zf),
            Mode::Eval => self.whiten_eval(zf),
        }
    }

    /// Whitens with batch statistics and folds them into the running estimates.
    pub fn whiten_train(&mut self, zf: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_dim(zf)?;
        let (mean, cov) = batch_stats(zf)?;
        let w = zca_matrix(&cov, self.eps)?;
        let out = apply_whitening(&w, &mean, zf)?;

        let m = self.momentum;
        let fresh = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&mean) {
            *r = m * *r + fresh * b;
        }
        for (r, &b) in self
            .running_covariance
            .as_mut_slice()
            .iter_mut()
            .zip(cov.as_slice())
        {
            *r = m * *r + fresh * b;
        }
        self.running_whitening = zca_matrix(&self.running_covariance, self.eps)?;
        self.mean = mean;
        self.covariance = cov;
        self.whitening_matrix = w;
        Ok(out)
    }

    /// Replaces the running estimates, e.g. with population statistics of a whole dataset.
    pub fn set_running(&mut self, mean: Vec<T>, covariance: Matrix<T>) -> Result<()> {
        let d = self.dim();
        if mean.len() != d || covariance.shape() != (d, d) {
            return Err(WhiteningError::DimensionMismatch {
                expected: d,
                actual: mean.len(),
            });
        }
        self.running_whitening = zca_matrix(&covariance, self.eps)?;
        self.running_mean = mean;
        self.running_covariance = covariance;
        Ok(())
    }

    /// Whitens with running statistics.
    pub fn whiten_eval(&self, zf: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_dim(zf)?;
        apply_whitening(&self.running_whitening, &self.running_mean, zf)
    }
}
