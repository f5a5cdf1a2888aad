//! Classification metrics, latent concept detection and permutation concept importance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::nn::{cross_entropy, NetError, TinyNet};
use crate::tensor::FeatureTensor;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error(
        "AUC needs at least one positive and one negative (got {positives} positives of {total})"
    )]
    Degenerate { positives: usize, total: usize },
    #[error("{what}: lengths {left} and {right} differ")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("permutation importance needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("concept {concept} out of range for {channels} latent channels")]
    BadConcept { concept: usize, channels: usize },
    #[error("score is not finite")]
    NonFinite,
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Scores and binary ground truth for a ROC curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RocInput {
    pub scores: Vec<f64>,
    pub positives: Vec<bool>,
}

impl RocInput {
    pub fn new(scores: Vec<f64>, positives: Vec<bool>) -> Result<Self> {
        if scores.len() != positives.len() {
            return Err(MetricsError::LengthMismatch {
                what: "scores and labels",
                left: scores.len(),
                right: positives.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        let p = positives.iter().filter(|&&b| b).count();
        if p == 0 || p == positives.len() {
            return Err(MetricsError::Degenerate {
                positives: p,
                total: positives.len(),
            });
        }
        Ok(Self { scores, positives })
    }
}

/// Mann–Whitney AUC, `(wins + ½·ties) / (P·N)`, computed from midranks in `O(n log n)`.
pub fn auc(input: &RocInput) -> f64 {
    let n = input.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| input.scores[a].total_cmp(&input.scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && input.scores[order[j + 1]] == input.scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if input.positives[o] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = input.positives.iter().filter(|&&b| b).count() as f64;
    let q = n as f64 - p;
    (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q)
}

/// Convenience wrapper validating and scoring in one call.
pub fn auc_of(scores: &[f64], positives: &[bool]) -> Result<f64> {
    Ok(auc(&RocInput::new(scores.to_vec(), positives.to_vec())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro F1 over the classes `0..=max(label, pred)`; a class with `0/0` F1 scores 0.
pub fn accuracy_f1(preds: &[usize], labels: &[usize]) -> Result<Classification> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what: "predictions and labels",
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Ok(Classification {
            accuracy: 0.0,
            macro_f1: 0.0,
        });
    }
    let classes = preds.iter().chain(labels).max().copied().unwrap_or(0) + 1;
    let (mut tp, mut fp, mut fneg) = (
        vec![0usize; classes],
        vec![0usize; classes],
        vec![0usize; classes],
    );
    let mut correct = 0;
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            correct += 1;
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let f1_sum: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(Classification {
        accuracy: correct as f64 / preds.len() as f64,
        macro_f1: f1_sum / classes as f64,
    })
}

/// Spatial reduction of a latent channel into a per-image concept score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPool {
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for EvalPool {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(EvalPool::Max),
            "mean" => Ok(EvalPool::Mean),
            other => Err(format!(
                "unknown eval pool {other:?} (expected max or mean)"
            )),
        }
    }
}

/// Anything that maps images to an eval-mode latent tensor `Z′`.
pub trait LatentProbe<T> {
    fn latent(&self, images: &FeatureTensor<T>) -> std::result::Result<FeatureTensor<T>, NetError>;
}

impl<T: Scalar> LatentProbe<T> for TinyNet<T> {
    fn latent(&self, images: &FeatureTensor<T>) -> std::result::Result<FeatureTensor<T>, NetError> {
        Ok(self.infer(images)?.latent)
    }
}

const CHUNK: usize = 128;

/// Per-image scores of every latent channel: `scores[b][c]`.
pub fn latent_scores<T: Scalar, P: LatentProbe<T> + ?Sized>(
    probe: &P,
    images: &FeatureTensor<T>,
    pool: EvalPool,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.batch());
    for start in (0..images.batch()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(images.batch())).collect();
        let z = probe.latent(&images.select(&idx))?;
        for b in 0..idx.len() {
            let img = z.image(b);
            out.push(
                (0..img.channels)
                    .map(|c| {
                        let ch = img.channel(c);
                        match pool {
                            EvalPool::Max => {
                                ch.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()))
                            }
                            EvalPool::Mean => {
                                ch.iter().map(|v| v.as_f64()).sum::<f64>() / ch.len() as f64
                            }
                        }
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// `None` for concepts without both positive and negative images.
    pub per_concept: Vec<Option<f64>>,
    /// Mean over the scored concepts.
    pub mean: f64,
    pub skipped: Vec<usize>,
}

/// One-vs-all AUC of latent channel `k` as a detector of concept `k`.
///
/// `labels[i][k]` marks concept `k` in image `i`.
pub fn concept_detection<T: Scalar, P: LatentProbe<T> + ?Sized>(
    probe: &P,
    images: &FeatureTensor<T>,
    labels: &[Vec<bool>],
    num_concepts: usize,
    pool: EvalPool,
) -> Result<DetectionReport> {
    if labels.len() != images.batch() {
        return Err(MetricsError::LengthMismatch {
            what: "images and concept labels",
            left: images.batch(),
            right: labels.len(),
        });
    }
    let scores = latent_scores(probe, images, pool)?;
    let channels = scores.first().map_or(0, |s| s.len());
    let mut per_concept = Vec::with_capacity(num_concepts);
    let mut skipped = Vec::new();
    for k in 0..num_concepts {
        if k >= channels {
            return Err(MetricsError::BadConcept {
                concept: k,
                channels,
            });
        }
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let y: Vec<bool> = labels.iter().map(|l| l[k]).collect();
        match RocInput::new(s, y) {
            Ok(input) => per_concept.push(Some(auc(&input))),
            Err(MetricsError::Degenerate { .. }) => {
                skipped.push(k);
                per_concept.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let scored: Vec<f64> = per_concept.iter().flatten().copied().collect();
    let mean = if scored.is_empty() {
        f64::NAN
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(DetectionReport {
        per_concept,
        mean,
        skipped,
    })
}

/// Mean of a set of ratio samples with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEstimate {
    pub concept: usize,
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub per_concept: Vec<ImportanceEstimate>,
    /// Concepts ordered from most to least important.
    pub rank: Vec<usize>,
}

impl ImportanceReport {
    pub fn new(per_concept: Vec<ImportanceEstimate>) -> Self {
        let mut rank: Vec<usize> = (0..per_concept.len()).collect();
        rank.sort_by(|&a, &b| per_concept[b].mean.total_cmp(&per_concept[a].mean));
        let rank = rank.into_iter().map(|i| per_concept[i].concept).collect();
        Self { per_concept, rank }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImportanceConfig {
    pub batch_size: usize,
    /// Independent permutations per batch.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            repeats: 20,
            seed: 0,
        }
    }
}

/// `switched / original` cross-entropy after permuting column `k` of `pooled` by `perm`.
pub fn switched_loss_ratio<T: Scalar>(
    net: &TinyNet<T>,
    pooled: &Matrix<T>,
    labels: &[usize],
    k: usize,
    perm: &[usize],
) -> Result<f64> {
    let (orig, _) = cross_entropy(&net.head_logits(pooled)?, labels)?;
    let mut switched = pooled.clone();
    for (r, &src) in perm.iter().enumerate() {
        switched[(r, k)] = pooled[(src, k)];
    }
    let (sw, _) = cross_entropy(&net.head_logits(&switched)?, labels)?;
    Ok(sw.as_f64() / orig.as_f64())
}

/// `CI_k`: mean over batches and permutations of the switched-to-original loss ratio.
///
/// Coordinate `k` of the pooled post-CAW vector is permuted uniformly across each batch.
pub fn concept_importance<T: Scalar>(
    net: &TinyNet<T>,
    images: &FeatureTensor<T>,
    labels: &[usize],
    k: usize,
    cfg: &ImportanceConfig,
) -> Result<ImportanceEstimate> {
    if labels.len() != images.batch() {
        return Err(MetricsError::LengthMismatch {
            what: "images and labels",
            left: images.batch(),
            right: labels.len(),
        });
    }
    if cfg.batch_size < 2 || images.batch() < 2 {
        return Err(MetricsError::BatchTooSmall(
            cfg.batch_size.min(images.batch()),
        ));
    }
    if k >= net.feature_channels() {
        return Err(MetricsError::BadConcept {
            concept: k,
            channels: net.feature_channels(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64);
    let mut ratios = Vec::new();
    for start in (0..images.batch()).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(images.batch());
        if end - start < 2 {
            continue;
        }
        let idx: Vec<usize> = (start..end).collect();
        let pooled = net.infer(&images.select(&idx))?.pooled;
        let y = &labels[start..end];
        for _ in 0..cfg.repeats {
            let mut perm = idx.iter().map(|i| i - start).collect::<Vec<_>>();
            perm.shuffle(&mut rng);
            ratios.push(switched_loss_ratio(net, &pooled, y, k, &perm)?);
        }
    }
    let n = ratios.len();
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(ImportanceEstimate {
        concept: k,
        mean,
        std_err,
        samples: n,
    })
}

/// [`concept_importance`] for concepts `0..num_concepts`.
pub fn importance_report<T: Scalar>(
    net: &TinyNet<T>,
    images: &FeatureTensor<T>,
    labels: &[usize],
    num_concepts: usize,
    cfg: &ImportanceConfig,
) -> Result<ImportanceReport> {
    let per = (0..num_concepts)
        .map(|k| concept_importance(net, images, labels, k, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceReport::new(per))
}
