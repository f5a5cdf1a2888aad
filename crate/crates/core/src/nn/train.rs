//! Concept-classifier pretraining and the dual-branch training loop.
//!
//! The diagnosis branch runs plain SGD on cross-entropy with `Q` fixed. Every
//! `update_period` batches the alignment branch rebuilds the concept feature
//! bank from the current network and takes Cayley steps on `Q`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::net::{binary_cross_entropy, cross_entropy, sgd_step, NetConfig, NetError, TinyNet};
use crate::grid::BitGrid;
use crate::linalg::{matmul_tn, Matrix};
use crate::mask::{
    build_feature_bank, generate_concept_masks, ConceptSample, MaskError, MaskMode, MaskOptions,
    MaskSource, PoolMode, PrototypeMatrix,
};
use crate::stiefel::{alignment_objective, run_alignment_pass, AlignConfig, AlignError};
use crate::tensor::FeatureTensor;
use crate::whitening::{flatten, Mode};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("concept {0} has no images in the concept dataset")]
    EmptyConcept(usize),
    #[error("{what}: expected {expected}, got {actual}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("network has no CAW layer to align")]
    NoCaw,
    #[error("loss became non-finite at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Images with class labels (`y_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages<T> {
    pub images: FeatureTensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn new(images: FeatureTensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(TrainError::Mismatch {
                what: "label count",
                expected: images.batch(),
                actual: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Images with multi-label concept annotations and optional external masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDataset<T> {
    pub images: FeatureTensor<T>,
    /// `concepts[i][k]`: concept `k` is present in image `i`.
    pub concepts: Vec<Vec<bool>>,
    /// Feature-grid masks for the `lesion` mode, `external_masks[i][k]`.
    pub external_masks: Option<Vec<Vec<BitGrid>>>,
}

impl<T: Scalar> ConceptDataset<T> {
    pub fn new(images: FeatureTensor<T>, concepts: Vec<Vec<bool>>) -> Result<Self> {
        if images.batch() != concepts.len() {
            return Err(TrainError::Mismatch {
                what: "concept label count",
                expected: images.batch(),
                actual: concepts.len(),
            });
        }
        Ok(Self {
            images,
            concepts,
            external_masks: None,
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.first().map_or(0, |c| c.len())
    }

    fn check_coverage(&self) -> Result<()> {
        if self.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        for k in 0..self.num_concepts() {
            if !self.concepts.iter().any(|c| c[k]) {
                return Err(TrainError::EmptyConcept(k));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ConceptTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub align: AlignConfig,
    /// Mask threshold `γ`.
    pub gamma: f64,
    pub eps: f64,
    pub momentum: f64,
    pub mask_mode: MaskMode,
    pub mask_source: MaskSource,
    pub pool: PoolMode,
    /// Rotate the head weights with `Q` so an alignment pass leaves the logits unchanged.
    pub compensate_head: bool,
    /// After the last epoch, replace the running whitening statistics with training-set population statistics.
    pub recalibrate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.2,
            seed: 0,
            align: AlignConfig::default(),
            gamma: 0.5,
            eps: crate::whitening::DEFAULT_EPS,
            momentum: crate::whitening::DEFAULT_MOMENTUM,
            mask_mode: MaskMode::ConceptMask,
            mask_source: MaskSource::Label,
            pool: PoolMode::SelectedPixels,
            compensate_head: true,
            recalibrate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.align.eta > 0.0 && self.align.eta.is_finite()) {
            return bad("align.eta must be positive");
        }
        if self.align.update_period == Some(0) {
            return bad("align.update_period must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub ce_loss: f64,
    /// Objective after the most recent alignment pass, if any has run.
    pub align_objective: Option<f64>,
    pub ortho_residual: f64,
}

/// Progress counters, enough to resume at an epoch boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub steps_done: usize,
    pub align_passes: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub net: TinyNet<T>,
    pub state: TrainState,
    pub log: Vec<LogRow>,
    /// Concept samples whose mask was empty and fell back to whole-grid pooling, summed over passes.
    pub mask_fallbacks: usize,
    /// Objective after the most recent alignment pass.
    pub last_objective: Option<f64>,
}

impl<T: Scalar> TrainedModel<T> {
    /// An untrained model at epoch zero.
    pub fn fresh(net: TinyNet<T>) -> Self {
        Self {
            net,
            state: TrainState::default(),
            log: Vec::new(),
            mask_fallbacks: 0,
            last_objective: None,
        }
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains a CAW-free network with a sigmoid head over the dataset's concepts.
///
/// Returns the network and its head weights as concept prototypes.
pub fn pretrain_concept_net<T: Scalar>(
    data: &ConceptDataset<T>,
    net_cfg: &NetConfig,
    cfg: &ConceptTrainConfig,
) -> Result<(TinyNet<T>, PrototypeMatrix<T>)> {
    data.check_coverage()?;
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(TrainError::Config(
            "concept batch_size and learning_rate must be positive".into(),
        ));
    }
    let k = data.num_concepts();
    let net_cfg = NetConfig {
        in_channels: data.images.channels(),
        num_outputs: k,
        num_concepts: k,
        use_caw: false,
        ..*net_cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut net = TinyNet::new(&net_cfg, &mut rng)?;
    let lr = T::of(cfg.learning_rate);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed ^ 0x5eed, epoch);
        for idx in order.chunks(cfg.batch_size) {
            let images = data.images.select(idx);
            let targets: Vec<Vec<bool>> = idx.iter().map(|&i| data.concepts[i].clone()).collect();
            let (logits, cache) = net.forward(&images, Mode::Train)?;
            let (loss, dlogits) = binary_cross_entropy(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged(step));
            }
            let grads = net.backward(&cache, &dlogits)?;
            sgd_step(&mut net, &grads, lr);
            step += 1;
        }
    }
    let prototypes = PrototypeMatrix::from_head(&net.head)?;
    Ok((net, prototypes))
}

/// Freshly initialized main network for `cfg`.
pub fn init_main_net<T: Scalar>(net_cfg: &NetConfig, cfg: &TrainConfig) -> Result<TinyNet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net_cfg = NetConfig {
        eps: cfg.eps,
        momentum: cfg.momentum,
        ..*net_cfg
    };
    Ok(TinyNet::new(&net_cfg, &mut rng)?)
}

/// Copies the first convolution of `backbone` into `net`.
///
/// Only the low-level filters move over; the layer feeding the CAW module trains from scratch.
pub fn warm_start<T: Scalar>(net: &mut TinyNet<T>, backbone: &TinyNet<T>) -> Result<()> {
    let (ours, theirs) = (&net.conv1, &backbone.conv1);
    if ours.weight.len() != theirs.weight.len() || ours.bias.len() != theirs.bias.len() {
        return Err(TrainError::Mismatch {
            what: "conv1 shape",
            expected: ours.weight.len(),
            actual: theirs.weight.len(),
        });
    }
    net.conv1 = backbone.conv1.clone();
    Ok(())
}

/// Pooling weights for the concept dataset under the configured mask mode.
pub fn concept_samples<T: Scalar>(
    concept_data: &ConceptDataset<T>,
    concept_net: &TinyNet<T>,
    prototypes: &PrototypeMatrix<T>,
    cfg: &TrainConfig,
) -> Result<Vec<ConceptSample<T>>> {
    concept_data.check_coverage()?;
    let opts = MaskOptions {
        mode: cfg.mask_mode,
        gamma: cfg.gamma,
        source: cfg.mask_source,
        pool: cfg.pool,
        seed: cfg.seed,
    };
    let lookup = |i: usize, k: usize| {
        concept_data
            .external_masks
            .as_ref()
            .and_then(|m| m.get(i))
            .and_then(|row| row.get(k))
            .cloned()
    };
    let external: Option<&dyn Fn(usize, usize) -> Option<BitGrid>> = Some(&lookup);
    Ok(generate_concept_masks(
        &concept_data.images,
        &concept_data.concepts,
        concept_net,
        prototypes,
        &opts,
        external,
    )?)
}

/// One alignment pass: rebuild the bank from `net`, step `Q`, and optionally carry the head along.
///
/// Returns the objective after the pass and the number of mask fallbacks.
pub fn align_once<T: Scalar>(
    net: &mut TinyNet<T>,
    concept_data: &ConceptDataset<T>,
    samples: &[ConceptSample<T>],
    cfg: &TrainConfig,
) -> Result<(f64, usize)> {
    let caw = net.caw.as_ref().ok_or(TrainError::NoCaw)?;
    let k = caw.basis.num_concepts();
    let built = build_feature_bank(&concept_data.images, samples, net, k, cfg.pool)?;
    let old = caw.basis.clone();
    let new = run_alignment_pass(&old, &built.bank, &cfg.align)?;
    let objective = alignment_objective(&new, &built.bank)?.as_f64();
    if cfg.compensate_head {
        // Logits are linear in Qᵀψ̄, so H ← H·Q_oldᵀ·Q_new preserves them.
        let (c, d) = (net.head.out_features, net.head.in_features);
        let h = Matrix::from_vec(c, d, net.head.weight.clone()).map_err(NetError::from)?;
        let r = matmul_tn(old.matrix(), new.matrix()).map_err(NetError::from)?;
        let rotated = crate::linalg::matmul(&h, &r).map_err(NetError::from)?;
        net.head.weight = rotated.into_vec();
    }
    net.set_basis(new);
    Ok((objective, built.fallbacks))
}

/// Sets the CAW running statistics to the population mean and covariance of `Z` over `images`.
///
/// A no-op without a CAW layer.
pub fn recalibrate_whitening<T: Scalar>(
    net: &mut TinyNet<T>,
    images: &FeatureTensor<T>,
) -> Result<()> {
    let Some(caw) = &net.caw else {
        return Ok(());
    };
    let d = caw.whitening.dim();
    if images.batch() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    // Two passes keep the covariance accurate in f32.
    let chunks: Vec<Vec<usize>> = (0..images.batch())
        .collect::<Vec<_>>()
        .chunks(128)
        .map(|c| c.to_vec())
        .collect();
    let mut sum = vec![0.0f64; d];
    let mut count = 0usize;
    for idx in &chunks {
        let z = net.front(&images.select(idx))?;
        let zf = flatten(&z);
        for c in 0..d {
            sum[c] += zf.row(c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        count += zf.cols();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut cov = vec![0.0f64; d * d];
    for idx in &chunks {
        let z = net.front(&images.select(idx))?;
        let zf = flatten(&z);
        let centred: Vec<Vec<f64>> = (0..d)
            .map(|c| zf.row(c).iter().map(|v| v.as_f64() - mean[c]).collect())
            .collect();
        for a in 0..d {
            for b in a..d {
                let s: f64 = centred[a].iter().zip(&centred[b]).map(|(x, y)| x * y).sum();
                cov[a * d + b] += s;
            }
        }
    }
    let mut cov_t = Matrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = T::of(cov[a * d + b] / count as f64);
            cov_t[(a, b)] = v;
            cov_t[(b, a)] = v;
        }
    }
    let mean_t = mean.into_iter().map(T::of).collect();
    let caw = net.caw.as_mut().expect("checked above");
    caw.whitening
        .set_running(mean_t, cov_t)
        .map_err(NetError::from)?;
    Ok(())
}

/// Dual-branch training from a fresh state.
pub fn train<T: Scalar>(
    net: TinyNet<T>,
    disease: &LabeledImages<T>,
    concept_data: &ConceptDataset<T>,
    concept_net: &TinyNet<T>,
    prototypes: &PrototypeMatrix<T>,
    cfg: &TrainConfig,
) -> Result<TrainedModel<T>> {
    resume(
        TrainedModel::fresh(net),
        disease,
        concept_data,
        concept_net,
        prototypes,
        cfg,
    )
}

/// Continues training `model` until `cfg.epochs` epochs are done.
///
/// Batch order depends only on `(seed, epoch)`, so stopping at an epoch
/// boundary and resuming reproduces an uninterrupted run exactly when
/// `recalibrate` is off. With it on, the interrupted run's running statistics
/// are the recalibrated ones, which shifts later alignment passes slightly.
pub fn resume<T: Scalar>(
    mut model: TrainedModel<T>,
    disease: &LabeledImages<T>,
    concept_data: &ConceptDataset<T>,
    concept_net: &TinyNet<T>,
    prototypes: &PrototypeMatrix<T>,
    cfg: &TrainConfig,
) -> Result<TrainedModel<T>> {
    cfg.validate()?;
    if disease.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let period = match (&model.net.caw, cfg.align.update_period) {
        (Some(_), Some(p)) => Some(p),
        _ => None,
    };
    let samples = match period {
        Some(_) => concept_samples(concept_data, concept_net, prototypes, cfg)?,
        None => Vec::new(),
    };
    let lr = T::of(cfg.learning_rate);
    for epoch in model.state.epochs_done..cfg.epochs {
        let order = epoch_order(disease.len(), cfg.seed, epoch);
        for idx in order.chunks(cfg.batch_size) {
            let step = model.state.steps_done;
            let images = disease.images.select(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| disease.labels[i]).collect();
            let net = &mut model.net;
            let (logits, cache) = net.forward(&images, Mode::Train)?;
            let (loss, dlogits) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged(step));
            }
            let grads = net.backward(&cache, &dlogits)?;
            sgd_step(net, &grads, lr);
            if let Some(p) = period {
                if (step + 1) % p == 0 {
                    let (obj, fallbacks) = align_once(net, concept_data, &samples, cfg)?;
                    model.last_objective = Some(obj);
                    model.mask_fallbacks += fallbacks;
                    model.state.align_passes += 1;
                }
            }
            let residual = net
                .caw
                .as_ref()
                .map_or(0.0, |c| c.basis.residual().as_f64());
            model.log.push(LogRow {
                step,
                ce_loss: loss.as_f64(),
                align_objective: model.last_objective,
                ortho_residual: residual,
            });
            model.state.steps_done += 1;
        }
        model.state.epochs_done = epoch + 1;
    }
    if cfg.recalibrate && model.state.epochs_done > 0 {
        recalibrate_whitening(&mut model.net, &disease.images)?;
    }
    Ok(model)
}
