//! Concept alignment of the rotation `Q` by Cayley steps on the orthogonal group.
//!
//! The alignment objective is `Σ_k mean_{v ∈ bank_k} q_kᵀ v`, to be maximized.
//! Steps descend the loss `−objective`, so the Euclidean gradient `G` has
//! column `k` equal to minus the mean of the concept-`k` bank vectors.

use thiserror::Error;

use crate::linalg::{inv_sqrt_psd, matmul, matmul_tn, solve, LinalgError, Matrix};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error("concept {concept} has no feature vectors in the bank")]
    EmptyConcept { concept: usize },
    #[error("feature vector of length {actual} does not match dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("concept index {concept} out of range for {num_concepts} concepts")]
    BadConcept { concept: usize, num_concepts: usize },
    #[error("basis has {num_concepts} concepts but dimension {dim}")]
    TooManyConcepts { num_concepts: usize, dim: usize },
    #[error("matrix is not orthogonal (residual {residual:e})")]
    NotOrthogonal { residual: f64 },
    #[error("Cayley system singular at step size {eta}; shrink the step size")]
    StepSize { eta: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AlignError>;

/// Maximum tolerated `‖QᵀQ − I‖_∞` before the drift guard re-orthonormalizes.
pub const ORTHO_TOL: f64 = 1e-6;
const MAX_HALVINGS: usize = 5;

/// `‖QᵀQ − I‖_∞` (largest absolute entry).
pub fn orthogonality_residual<T: Scalar>(q: &Matrix<T>) -> T {
    let qtq = matmul_tn(q, q).expect("square matrix");
    let mut worst = T::zero();
    for i in 0..q.cols() {
        for j in 0..q.cols() {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((qtq[(i, j)] - target).abs());
        }
    }
    worst
}

/// Orthogonal `d × d` matrix whose first `num_concepts` columns are concept axes.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalBasis<T> {
    q: Matrix<T>,
    num_concepts: usize,
    drift_corrections: usize,
}

impl<T: Scalar> OrthogonalBasis<T> {
    pub fn identity(dim: usize, num_concepts: usize) -> Result<Self> {
        Self::new(Matrix::identity(dim), num_concepts)
    }

    pub fn new(q: Matrix<T>, num_concepts: usize) -> Result<Self> {
        if !q.is_square() {
            return Err(LinalgError::NotSquare {
                op: "OrthogonalBasis",
                rows: q.rows(),
                cols: q.cols(),
            }
            .into());
        }
        if num_concepts > q.rows() {
            return Err(AlignError::TooManyConcepts {
                num_concepts,
                dim: q.rows(),
            });
        }
        let residual = orthogonality_residual(&q);
        if !(residual < T::of(ORTHO_TOL)) {
            return Err(AlignError::NotOrthogonal {
                residual: residual.as_f64(),
            });
        }
        Ok(Self {
            q,
            num_concepts,
            drift_corrections: 0,
        })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    /// Concept axis `q_k`.
    pub fn axis(&self, k: usize) -> Vec<T> {
        self.q.column(k)
    }

    pub fn residual(&self) -> T {
        orthogonality_residual(&self.q)
    }

    /// Number of times the drift guard re-orthonormalized this basis.
    pub fn drift_corrections(&self) -> usize {
        self.drift_corrections
    }

    /// Restores a persisted drift-correction count.
    pub fn with_drift_corrections(mut self, count: usize) -> Self {
        self.drift_corrections = count;
        self
    }

    /// Replaces `Q` with its polar factor `Q (QᵀQ)^{-1/2}` when drift exceeds [`ORTHO_TOL`].
    fn guard_drift(&mut self) -> Result<()> {
        if self.residual() > T::of(ORTHO_TOL) {
            let qtq = matmul_tn(&self.q, &self.q)?;
            let inv_sqrt = inv_sqrt_psd(&qtq, T::zero())?;
            self.q = matmul(&self.q, &inv_sqrt)?;
            self.drift_corrections += 1;
        }
        Ok(())
    }
}

/// Masked, pooled, whitened feature vectors grouped by concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptFeatureBank<T> {
    dim: usize,
    per_concept: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> ConceptFeatureBank<T> {
    pub fn new(dim: usize, num_concepts: usize) -> Self {
        Self {
            dim,
            per_concept: vec![Vec::new(); num_concepts],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_concepts(&self) -> usize {
        self.per_concept.len()
    }

    pub fn push(&mut self, concept: usize, v: Vec<T>) -> Result<()> {
        if v.len() != self.dim {
            return Err(AlignError::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        let num_concepts = self.per_concept.len();
        self.per_concept
            .get_mut(concept)
            .ok_or(AlignError::BadConcept {
                concept,
                num_concepts,
            })?
            .push(v);
        Ok(())
    }

    pub fn vectors(&self, concept: usize) -> &[Vec<T>] {
        &self.per_concept[concept]
    }

    /// Errors on the first concept with no vectors.
    pub fn validate(&self) -> Result<()> {
        match self.per_concept.iter().position(|v| v.is_empty()) {
            Some(concept) => Err(AlignError::EmptyConcept { concept }),
            None => Ok(()),
        }
    }

    /// Per-concept mean vectors.
    pub fn means(&self) -> Result<Vec<Vec<T>>> {
        self.validate()?;
        Ok(self
            .per_concept
            .iter()
            .map(|vs| {
                let mut m = vec![T::zero(); self.dim];
                for v in vs {
                    for (a, &b) in m.iter_mut().zip(v) {
                        *a += b;
                    }
                }
                let inv = T::one() / T::of_usize(vs.len());
                m.iter_mut().for_each(|a| *a *= inv);
                m
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    /// Cayley step size η.
    pub eta: f64,
    pub steps_per_pass: usize,
    /// Main-branch batches between alignment passes; `None` never aligns.
    pub update_period: Option<usize>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            steps_per_pass: 1,
            update_period: Some(30),
        }
    }
}

fn check_bank<T: Scalar>(q: &OrthogonalBasis<T>, bank: &ConceptFeatureBank<T>) -> Result<()> {
    if bank.dim() != q.dim() {
        return Err(AlignError::DimensionMismatch {
            expected: q.dim(),
            actual: bank.dim(),
        });
    }
    if bank.num_concepts() != q.num_concepts() {
        return Err(AlignError::BadConcept {
            concept: bank.num_concepts(),
            num_concepts: q.num_concepts(),
        });
    }
    bank.validate()
}

pub fn alignment_objective<T: Scalar>(
    q: &OrthogonalBasis<T>,
    bank: &ConceptFeatureBank<T>,
) -> Result<T> {
    check_bank(q, bank)?;
    let means = bank.means()?;
    let mut total = T::zero();
    for (k, m) in means.iter().enumerate() {
        for (i, &v) in m.iter().enumerate() {
            total += q.q[(i, k)] * v;
        }
    }
    Ok(total)
}

/// Euclidean gradient of the loss `−objective` with respect to `Q`.
pub fn alignment_gradient<T: Scalar>(
    q: &OrthogonalBasis<T>,
    bank: &ConceptFeatureBank<T>,
) -> Result<Matrix<T>> {
    check_bank(q, bank)?;
    let mut g = Matrix::zeros(q.dim(), q.dim());
    for (k, m) in bank.means()?.iter().enumerate() {
        let neg: Vec<T> = m.iter().map(|&v| -v).collect();
        g.set_column(k, &neg);
    }
    Ok(g)
}

/// One Cayley retraction step: `Q' = (I + η/2·A)^{-1} (I − η/2·A) Q`, `A = G Qᵀ − Q Gᵀ`.
pub fn cayley_step<T: Scalar>(
    q: &OrthogonalBasis<T>,
    g: &Matrix<T>,
    eta: T,
) -> Result<OrthogonalBasis<T>> {
    let d = q.dim();
    if g.shape() != (d, d) {
        return Err(LinalgError::DimensionMismatch {
            op: "cayley_step",
            left: (d, d),
            right: g.shape(),
        }
        .into());
    }
    let gqt = matmul(g, &q.q.transpose())?;
    let a = gqt.sub(&gqt.transpose())?;
    if a.max_abs() == T::zero() {
        return Ok(q.clone());
    }
    let half = a.scale(eta * T::of(0.5));
    let identity = Matrix::identity(d);
    let lhs = identity.add(&half)?;
    let rhs = matmul(&identity.sub(&half)?, &q.q)?;
    let next = match solve(&lhs, &rhs) {
        Ok(m) => m,
        Err(LinalgError::Singular { .. }) => {
            return Err(AlignError::StepSize { eta: eta.as_f64() })
        }
        Err(e) => return Err(e.into()),
    };
    let mut basis = OrthogonalBasis {
        q: next,
        num_concepts: q.num_concepts,
        drift_corrections: q.drift_corrections,
    };
    basis.guard_drift()?;
    Ok(basis)
}

/// Applies `cfg.steps_per_pass` Cayley steps, halving η (up to five times) on a singular step.
pub fn run_alignment_pass<T: Scalar>(
    q: &OrthogonalBasis<T>,
    bank: &ConceptFeatureBank<T>,
    cfg: &AlignConfig,
) -> Result<OrthogonalBasis<T>> {
    let mut current = q.clone();
    if cfg.steps_per_pass == 0 {
        return Ok(current);
    }
    // The objective is linear in Q, so its gradient does not change within a pass.
    let g = alignment_gradient(q, bank)?;
    for _ in 0..cfg.steps_per_pass {
        let mut eta = cfg.eta;
        let mut halvings = 0;
        current = loop {
            match cayley_step(&current, &g, T::of(eta)) {
                Ok(next) => break next,
                Err(AlignError::StepSize { .. }) if halvings < MAX_HALVINGS => {
                    eta *= 0.5;
                    halvings += 1;
                }
                Err(e) => return Err(e),
            }
        };
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = Matrix<f64>;

    fn bank_from(dim: usize, vectors: &[Vec<Vec<f64>>]) -> ConceptFeatureBank<f64> {
        let mut bank = ConceptFeatureBank::new(dim, vectors.len());
        for (k, vs) in vectors.iter().enumerate() {
            for v in vs {
                bank.push(k, v.clone()).unwrap();
            }
        }
        bank
    }

    fn axis(d: usize, i: usize, s: f64) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = s;
        v
    }

    #[test]
    fn objective_on_axis_aligned_banks() {
        let q = OrthogonalBasis::identity(5, 3).unwrap();
        let pos = bank_from(
            5,
            &[
                vec![axis(5, 0, 1.0)],
                vec![axis(5, 1, 1.0)],
                vec![axis(5, 2, 1.0)],
            ],
        );
        assert_eq!(alignment_objective(&q, &pos).unwrap(), 3.0);
        let neg = bank_from(
            5,
            &[
                vec![axis(5, 0, -1.0)],
                vec![axis(5, 1, -1.0)],
                vec![axis(5, 2, -1.0)],
            ],
        );
        assert_eq!(alignment_objective(&q, &neg).unwrap(), -3.0);
    }

    #[test]
    fn empty_concept_is_an_error() {
        let q = OrthogonalBasis::identity(3, 2).unwrap();
        let bank = bank_from(3, &[vec![axis(3, 0, 1.0)], vec![]]);
        assert_eq!(
            alignment_objective(&q, &bank).unwrap_err(),
            AlignError::EmptyConcept { concept: 1 }
        );
        assert!(alignment_gradient(&q, &bank).is_err());
    }

    #[test]
    fn gradient_definition_cases() {
        let q = OrthogonalBasis::identity(3, 2).unwrap();
        let zero = bank_from(3, &[vec![vec![0.0; 3]], vec![vec![0.0; 3]]]);
        assert_eq!(alignment_gradient(&q, &zero).unwrap(), M::zeros(3, 3));

        let q = OrthogonalBasis::identity(2, 1).unwrap();
        let bank = bank_from(2, &[vec![vec![0.0, 1.0]]]);
        let g = alignment_gradient(&q, &bank).unwrap();
        assert_eq!(g, M::from_rows(&[&[0.0, 0.0], &[-1.0, 0.0]]));
    }

    #[test]
    fn zero_gradient_is_exact_fixed_point() {
        let q = OrthogonalBasis::identity(4, 2).unwrap();
        let next = cayley_step(&q, &M::zeros(4, 4), 0.7).unwrap();
        assert_eq!(next, q);
    }

    #[test]
    fn two_by_two_cayley_arithmetic() {
        let q = OrthogonalBasis::identity(2, 1).unwrap();
        let bank = bank_from(2, &[vec![vec![0.0, 1.0]]]);
        assert_eq!(alignment_objective(&q, &bank).unwrap(), 0.0);
        let g = alignment_gradient(&q, &bank).unwrap();
        let next = cayley_step(&q, &g, 2.0).unwrap();
        // A = [[0,1],[-1,0]]; (I+A)^{-1}(I-A) = [[0,-1],[1,0]].
        assert!(
            next.matrix()
                .sub(&M::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]))
                .unwrap()
                .max_abs()
                < 1e-15
        );
        assert!((alignment_objective(&next, &bank).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cayley_preserves_orthogonality_for_random_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut q = OrthogonalBasis::identity(8, 4).unwrap();
        for _ in 0..50 {
            let g = M::from_vec(8, 8, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let eta = rng.gen_range(0.01..3.0);
            q = cayley_step(&q, &g, eta).unwrap();
            assert!(q.residual() < 1e-10);
        }
    }

    #[test]
    fn zero_steps_is_noop() {
        let q = OrthogonalBasis::identity(3, 1).unwrap();
        let bank = bank_from(3, &[vec![vec![0.0, 1.0, 0.0]]]);
        let cfg = AlignConfig {
            steps_per_pass: 0,
            ..AlignConfig::default()
        };
        assert_eq!(run_alignment_pass(&q, &bank, &cfg).unwrap(), q);
    }

    #[test]
    fn objective_is_monotone_at_small_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let d = 6;
        let dirs: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                v[k] += 2.0;
                v
            })
            .collect();
        let bank = bank_from(d, &dirs.iter().map(|v| vec![v.clone()]).collect::<Vec<_>>());
        let cfg = AlignConfig {
            eta: 0.01,
            steps_per_pass: 1,
            update_period: None,
        };
        let mut q = OrthogonalBasis::identity(d, 3).unwrap();
        let mut last = alignment_objective(&q, &bank).unwrap();
        for _ in 0..300 {
            q = run_alignment_pass(&q, &bank, &cfg).unwrap();
            let now = alignment_objective(&q, &bank).unwrap();
            assert!(now >= last - 1e-12);
            last = now;
        }
    }

    #[test]
    fn dimension_checks() {
        let q = OrthogonalBasis::identity(3, 1).unwrap();
        let bank = bank_from(2, &[vec![vec![1.0, 0.0]]]);
        assert!(matches!(
            alignment_objective(&q, &bank),
            Err(AlignError::DimensionMismatch { .. })
        ));
        let mut b = ConceptFeatureBank::<f64>::new(3, 1);
        assert!(b.push(0, vec![1.0]).is_err());
        assert!(b.push(4, vec![1.0, 0.0, 0.0]).is_err());
        assert!(OrthogonalBasis::new(M::from_diag(&[1.0, 2.0]), 1).is_err());
        assert!(OrthogonalBasis::<f64>::identity(2, 3).is_err());
    }
}
