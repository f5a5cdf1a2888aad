//! Library results checked against independent brute-force computations.

use caw_core::grid::BitGrid;
use caw_core::linalg::{inv_sqrt_psd, matmul, sym_eig, Matrix};
use caw_core::mask::{masked_avg_pool, ConceptMask};
use caw_core::metrics::auc_of;
use caw_core::stiefel::{
    alignment_objective, run_alignment_pass, AlignConfig, ConceptFeatureBank, OrthogonalBasis,
};
use caw_core::tensor::FeatureTensor;
use caw_core::whitening::{batch_stats, zca_matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix<f64> {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn pairwise_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

#[test]
fn auc_matches_pairwise_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..60 {
        let n = rng.gen_range(2..80);
        let mut pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        // Coarse scores in half the trials so ties are common.
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if trial % 2 == 0 {
                    rng.gen_range(0..5) as f64
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let got = auc_of(&scores, &pos).unwrap();
        assert!(
            (got - pairwise_auc(&scores, &pos)).abs() < 1e-12,
            "trial {trial}"
        );
    }
}

#[test]
fn matmul_equals_triple_loop_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..60 {
        let (n, k, m) = (
            rng.gen_range(1..12),
            rng.gen_range(1..12),
            rng.gen_range(1..12),
        );
        let a = random_matrix(&mut rng, n, k);
        let b = random_matrix(&mut rng, k, m);
        let c = matmul(&a, &b).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a[(i, t)] * b[(t, j)];
                }
                assert_eq!(c[(i, j)].to_bits(), acc.to_bits());
            }
        }
    }
}

#[test]
fn masked_pool_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..60 {
        let (d, h, w) = (
            rng.gen_range(1..6),
            rng.gen_range(1..9),
            rng.gen_range(1..9),
        );
        let z = FeatureTensor::<f64>::from_vec(
            1,
            d,
            h,
            w,
            (0..d * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let mut bits = BitGrid::empty(h, w);
        for i in 0..h {
            for j in 0..w {
                bits.set(i, j, rng.gen_bool(0.3));
            }
        }
        let mask = ConceptMask {
            concept: 0,
            bits: bits.clone(),
        };
        let pooled = masked_avg_pool(&mask, z.image(0)).unwrap();
        let selected: Vec<(usize, usize)> = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .filter(|&(i, j)| bits.get(i, j))
            .collect();
        for c in 0..d {
            let expected = if selected.is_empty() {
                (0..h)
                    .flat_map(|i| (0..w).map(move |j| (i, j)))
                    .map(|(i, j)| z.get(0, c, i, j))
                    .sum::<f64>()
                    / (h * w) as f64
            } else {
                selected
                    .iter()
                    .map(|&(i, j)| z.get(0, c, i, j))
                    .sum::<f64>()
                    / selected.len() as f64
            };
            assert!((pooled.values[c] - expected).abs() < 1e-10);
        }
        assert_eq!(pooled.fallback, selected.is_empty());
    }
}

#[test]
fn eigendecomposition_reconstructs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..60 {
        let n = rng.gen_range(1..17);
        let a = random_matrix(&mut rng, n, n);
        let s = a.add(&a.transpose()).unwrap();
        let eig = sym_eig(&s).unwrap();
        let diff = eig.reconstruct().sub(&s).unwrap().max_abs();
        assert!(diff < 1e-9, "n={n} diff={diff}");
        assert!(eig.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
    }
}

#[test]
fn zca_of_diagonal_covariance() {
    let s = Matrix::from_diag(&[4.0, 9.0, 0.25]);
    let w = zca_matrix(&s, 0.0).unwrap();
    let expected = Matrix::from_diag(&[0.5, 1.0 / 3.0, 2.0]);
    assert!(w.sub(&expected).unwrap().max_abs() < 1e-12);
    // A rotated covariance whitens to the rotated inverse root.
    let (c, sn) = (0.6f64, 0.8f64);
    let r = Matrix::from_rows(&[&[c, -sn], &[sn, c]]);
    let s = matmul(
        &matmul(&r, &Matrix::from_diag(&[16.0, 1.0])).unwrap(),
        &r.transpose(),
    )
    .unwrap();
    let w = inv_sqrt_psd(&s, 0.0).unwrap();
    let expected = matmul(
        &matmul(&r, &Matrix::from_diag(&[0.25, 1.0])).unwrap(),
        &r.transpose(),
    )
    .unwrap();
    assert!(w.sub(&expected).unwrap().max_abs() < 1e-12);
}

#[test]
fn batch_stats_of_known_columns() {
    // Columns (1,2), (3,6), (5,10): mean (3,6), covariance [[8/3,16/3],[16/3,32/3]].
    let zf = Matrix::<f64>::from_rows(&[&[1.0, 3.0, 5.0], &[2.0, 6.0, 10.0]]);
    let (mean, cov) = batch_stats(&zf).unwrap();
    assert_eq!(mean, vec![3.0, 6.0]);
    let expected = Matrix::from_rows(&[&[8.0 / 3.0, 16.0 / 3.0], &[16.0 / 3.0, 32.0 / 3.0]]);
    assert!(cov.sub(&expected).unwrap().max_abs() < 1e-12);
}

#[test]
fn alignment_converges_to_planted_rotation() {
    // With means ±e_k the optimum of Σ q_kᵀ m_k is q_k = m_k.
    let d = 6;
    let mut bank = ConceptFeatureBank::new(d, 3);
    for k in 0..3 {
        let mut v = vec![0.0; d];
        v[(k + 2) % d] = if k == 1 { -1.0 } else { 1.0 };
        bank.push(k, v).unwrap();
    }
    let cfg = AlignConfig {
        eta: 0.1,
        steps_per_pass: 300,
        update_period: Some(1),
    };
    let q = run_alignment_pass(
        &OrthogonalBasis::<f64>::identity(d, 3).unwrap(),
        &bank,
        &cfg,
    )
    .unwrap();
    assert!((alignment_objective(&q, &bank).unwrap() - 3.0).abs() < 1e-6);
    assert!(q.residual() < 1e-10);
}
