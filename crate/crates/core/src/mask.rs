//! Weakly supervised concept masks.
//!
//! A pretrained concept classifier's head weights serve as concept prototypes.
//! Dotting a prototype with the classifier's feature map at every pixel gives a
//! concept activation map; min-max normalizing and thresholding it at `γ`
//! yields a binary concept mask, which selects the pixels of the main branch's
//! whitened features that are pooled into the alignment bank.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BitGrid, Grid};
use crate::linalg::Matrix;
use crate::nn::{sigmoid, Linear, NetError, TinyNet};
use crate::stiefel::{AlignError, ConceptFeatureBank};
use crate::tensor::{FeatureMap, FeatureTensor};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("prototype length {prototype} does not match {channels} feature channels")]
    LengthMismatch { prototype: usize, channels: usize },
    #[error("mask is {mask:?} but features are {feature:?}")]
    ShapeMismatch {
        mask: (usize, usize),
        feature: (usize, usize),
    },
    #[error("prototype matrix needs at least one finite column")]
    BadPrototypes,
    #[error("concept {concept} has no images in the concept dataset")]
    EmptyConcept { concept: usize },
    #[error("no external mask for image {image}, concept {concept}")]
    MissingExternal { image: usize, concept: usize },
    #[error("unknown mask mode {0:?}")]
    UnknownMode(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

pub type Result<T> = std::result::Result<T, MaskError>;

/// Concept prototypes: column `k` of the `d × K` classifier weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMatrix<T> {
    weights: Matrix<T>,
}

impl<T: Scalar> PrototypeMatrix<T> {
    pub fn new(weights: Matrix<T>) -> Result<Self> {
        if weights.cols() == 0 || weights.rows() == 0 || !weights.is_finite() {
            return Err(MaskError::BadPrototypes);
        }
        Ok(Self { weights })
    }

    /// Prototypes of a `d → K` classifier head.
    pub fn from_head(head: &Linear<T>) -> Result<Self> {
        let w = Matrix::from_vec(head.out_features, head.in_features, head.weight.clone())
            .map_err(|_| MaskError::BadPrototypes)?;
        Self::new(w.transpose())
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn num_concepts(&self) -> usize {
        self.weights.cols()
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn prototype(&self, k: usize) -> Vec<T> {
        self.weights.column(k)
    }
}

/// Min-max normalized activation map, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap<T> {
    pub grid: Grid<T>,
}

/// Binary concept mask over the feature grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMask {
    pub concept: usize,
    pub bits: BitGrid,
}

impl ConceptMask {
    /// Fraction of selected pixels.
    pub fn coverage(&self) -> f64 {
        let n = self.bits.bits.len();
        if n == 0 {
            0.0
        } else {
            self.bits.count() as f64 / n as f64
        }
    }
}

/// `M(i, j) = Σ_c p_c · Z_c(i, j)`.
pub fn activation_map<T: Scalar>(prototype: &[T], feature: FeatureMap<'_, T>) -> Result<Grid<T>> {
    if prototype.len() != feature.channels {
        return Err(MaskError::LengthMismatch {
            prototype: prototype.len(),
            channels: feature.channels,
        });
    }
    let mut out = Grid::filled(feature.height, feature.width, T::zero());
    for (c, &p) in prototype.iter().enumerate() {
        for (o, &z) in out.values.iter_mut().zip(feature.channel(c)) {
            *o += p * z;
        }
    }
    Ok(out)
}

/// `(x − min) / (max − min)`; a constant grid maps to all zeros.
pub fn normalize_map<T: Scalar>(raw: &Grid<T>) -> ActivationMap<T> {
    let (lo, hi) = raw.min_max();
    let range = hi - lo;
    let values = if range > T::zero() && range.is_finite() {
        raw.values
            .iter()
            .map(|&v| ((v - lo) / range).min(T::one()).max(T::zero()))
            .collect()
    } else {
        vec![T::zero(); raw.values.len()]
    };
    ActivationMap {
        grid: Grid::from_vec(raw.height, raw.width, values),
    }
}

/// Strict threshold: a pixel is selected iff its value exceeds `gamma`.
pub fn binarize<T: Scalar>(map: &ActivationMap<T>, gamma: T, concept: usize) -> ConceptMask {
    ConceptMask {
        concept,
        bits: BitGrid {
            height: map.grid.height,
            width: map.grid.width,
            bits: map.grid.values.iter().map(|&v| v > gamma).collect(),
        },
    }
}

/// How masked features are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Divide by the selected mass (number of selected pixels for binary masks).
    #[default]
    SelectedPixels,
    /// Divide by the full grid size `h·w`.
    FullGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature<T> {
    pub values: Vec<T>,
    /// The mask selected nothing and the full-grid average was used instead.
    pub fallback: bool,
}

/// Spatial weighting applied before pooling.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialWeights<T> {
    Binary(ConceptMask),
    Soft(Grid<T>),
}

impl<T: Scalar> SpatialWeights<T> {
    fn dims(&self) -> (usize, usize) {
        match self {
            SpatialWeights::Binary(m) => (m.bits.height, m.bits.width),
            SpatialWeights::Soft(g) => (g.height, g.width),
        }
    }

    fn weight(&self, p: usize) -> T {
        match self {
            SpatialWeights::Binary(m) => {
                if m.bits.bits[p] {
                    T::one()
                } else {
                    T::zero()
                }
            }
            SpatialWeights::Soft(g) => g.values[p],
        }
    }
}

fn full_average<T: Scalar>(feature: FeatureMap<'_, T>) -> Vec<T> {
    let inv = T::one() / T::of_usize(feature.spatial());
    (0..feature.channels)
        .map(|c| feature.channel(c).iter().copied().sum::<T>() * inv)
        .collect()
}

/// Weighted average pooling of one image's features.
pub fn weighted_pool<T: Scalar>(
    weights: &SpatialWeights<T>,
    feature: FeatureMap<'_, T>,
    mode: PoolMode,
) -> Result<PooledFeature<T>> {
    let (h, w) = weights.dims();
    if (h, w) != (feature.height, feature.width) {
        return Err(MaskError::ShapeMismatch {
            mask: (h, w),
            feature: (feature.height, feature.width),
        });
    }
    if let SpatialWeights::Binary(m) = weights {
        if m.bits.bits.iter().all(|&b| b) {
            return Ok(PooledFeature {
                values: full_average(feature),
                fallback: false,
            });
        }
    }
    let hw = h * w;
    let mass: T = (0..hw).map(|p| weights.weight(p)).sum();
    if !(mass > T::zero()) {
        return Ok(PooledFeature {
            values: full_average(feature),
            fallback: true,
        });
    }
    let denom = match mode {
        PoolMode::SelectedPixels => mass,
        PoolMode::FullGrid => T::of_usize(hw),
    };
    let values = (0..feature.channels)
        .map(|c| {
            let mut acc = T::zero();
            for (p, &z) in feature.channel(c).iter().enumerate() {
                let wt = weights.weight(p);
                if wt != T::zero() {
                    acc += wt * z;
                }
            }
            acc / denom
        })
        .collect();
    Ok(PooledFeature {
        values,
        fallback: false,
    })
}

/// Mean of the features at the mask's selected pixels (full-grid mean when it selects none).
pub fn masked_avg_pool<T: Scalar>(
    mask: &ConceptMask,
    whitened: FeatureMap<'_, T>,
) -> Result<PooledFeature<T>> {
    weighted_pool(
        &SpatialWeights::Binary(mask.clone()),
        whitened,
        PoolMode::SelectedPixels,
    )
}

/// Source of the spatial weights used to pool concept features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Thresholded, normalized activation map.
    #[default]
    ConceptMask,
    /// Normalized activation map used as soft weights.
    ConceptMap,
    /// Whole image.
    Raw,
    /// Independent fair-coin pixel masks.
    Random,
    /// Centred Gaussian bump as soft weights.
    Gaussian,
    /// Externally supplied binary masks.
    Lesion,
}

impl MaskMode {
    pub const ALL: [MaskMode; 6] = [
        MaskMode::Raw,
        MaskMode::Gaussian,
        MaskMode::Random,
        MaskMode::Lesion,
        MaskMode::ConceptMap,
        MaskMode::ConceptMask,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::ConceptMask => "concept-mask",
            MaskMode::ConceptMap => "concept-map",
            MaskMode::Raw => "raw",
            MaskMode::Random => "random",
            MaskMode::Gaussian => "gaussian",
            MaskMode::Lesion => "lesion",
        }
    }
}

impl FromStr for MaskMode {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self> {
        MaskMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| MaskError::UnknownMode(s.to_string()))
    }
}

/// Which concepts of an image receive a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    /// Every labelled concept, using its own prototype.
    #[default]
    Label,
    /// Every concept the concept classifier predicts (sigmoid > 0.5).
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskOptions {
    pub mode: MaskMode,
    pub gamma: f64,
    pub source: MaskSource,
    pub pool: PoolMode,
    /// Seeds the `random` mode.
    pub seed: u64,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            mode: MaskMode::ConceptMask,
            gamma: 0.5,
            source: MaskSource::Label,
            pool: PoolMode::SelectedPixels,
            seed: 0,
        }
    }
}

/// One `(image, concept)` pair of the concept dataset and its pooling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSample<T> {
    pub image: usize,
    pub concept: usize,
    pub weights: SpatialWeights<T>,
}

const CHUNK: usize = 64;

/// Normalized activation maps of `concept` for every image in `images`, computed with the concept network.
pub fn concept_activation_maps<T: Scalar>(
    images: &FeatureTensor<T>,
    concept_net: &TinyNet<T>,
    prototypes: &PrototypeMatrix<T>,
    concept: usize,
) -> Result<Vec<ActivationMap<T>>> {
    let proto = prototypes.prototype(concept);
    let mut maps = Vec::with_capacity(images.batch());
    for start in (0..images.batch()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(images.batch())).collect();
        let feats = concept_net.front(&images.select(&idx))?;
        for b in 0..idx.len() {
            maps.push(normalize_map(&activation_map(&proto, feats.image(b))?));
        }
    }
    Ok(maps)
}

fn gaussian_weights<T: Scalar>(h: usize, w: usize) -> Grid<T> {
    let sigma = h.min(w) as f64 / 4.0;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut g = Grid::filled(h, w, T::zero());
    for i in 0..h {
        for j in 0..w {
            let r2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            g.values[i * w + j] = T::of((-r2 / (2.0 * sigma * sigma)).exp());
        }
    }
    g
}

/// Produces pooling weights for every `(image, concept)` pair of the concept dataset.
///
/// `labels[i][k]` marks concept `k` in image `i`. `external` supplies masks for
/// [`MaskMode::Lesion`] at feature-grid resolution.
pub fn generate_concept_masks<T: Scalar>(
    images: &FeatureTensor<T>,
    labels: &[Vec<bool>],
    concept_net: &TinyNet<T>,
    prototypes: &PrototypeMatrix<T>,
    opts: &MaskOptions,
    external: Option<&dyn Fn(usize, usize) -> Option<BitGrid>>,
) -> Result<Vec<ConceptSample<T>>> {
    let k_total = prototypes.num_concepts();
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for start in (0..images.batch()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(images.batch())).collect();
        let inf = concept_net.infer(&images.select(&idx))?;
        let feats = &inf.features;
        let (h, w) = (feats.height(), feats.width());
        for (b, &image) in idx.iter().enumerate() {
            let active: Vec<usize> = match opts.source {
                MaskSource::Label => (0..k_total).filter(|&k| labels[image][k]).collect(),
                MaskSource::Predicted => (0..k_total)
                    .filter(|&k| sigmoid(inf.logits[(b, k)]) > T::of(0.5))
                    .collect(),
            };
            for concept in active {
                let weights = match opts.mode {
                    MaskMode::ConceptMask | MaskMode::ConceptMap => {
                        let raw = activation_map(&prototypes.prototype(concept), feats.image(b))?;
                        let map = normalize_map(&raw);
                        if opts.mode == MaskMode::ConceptMask {
                            SpatialWeights::Binary(binarize(&map, T::of(opts.gamma), concept))
                        } else {
                            SpatialWeights::Soft(map.grid)
                        }
                    }
                    MaskMode::Raw => SpatialWeights::Binary(ConceptMask {
                        concept,
                        bits: BitGrid::full(h, w),
                    }),
                    MaskMode::Random => {
                        let bits = (0..h * w).map(|_| rng.gen_bool(0.5)).collect();
                        SpatialWeights::Binary(ConceptMask {
                            concept,
                            bits: BitGrid {
                                height: h,
                                width: w,
                                bits,
                            },
                        })
                    }
                    MaskMode::Gaussian => SpatialWeights::Soft(gaussian_weights(h, w)),
                    MaskMode::Lesion => {
                        let bits = external
                            .and_then(|f| f(image, concept))
                            .ok_or(MaskError::MissingExternal { image, concept })?;
                        SpatialWeights::Binary(ConceptMask { concept, bits })
                    }
                };
                out.push(ConceptSample {
                    image,
                    concept,
                    weights,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankBuild<T> {
    pub bank: ConceptFeatureBank<T>,
    /// Samples whose mask selected nothing and fell back to full-grid pooling.
    pub fallbacks: usize,
}

/// Pools the main branch's whitened features `ψ(f(x))` under each sample's weights.
///
/// Vectors are appended in sample order, so the bank is deterministic for a given sample list.
pub fn build_feature_bank<T: Scalar>(
    images: &FeatureTensor<T>,
    samples: &[ConceptSample<T>],
    main_net: &TinyNet<T>,
    num_concepts: usize,
    pool: PoolMode,
) -> Result<BankBuild<T>> {
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (s, sample) in samples.iter().enumerate() {
        by_image.entry(sample.image).or_default().push(s);
    }
    let unique: Vec<usize> = by_image.keys().copied().collect();
    let mut pooled: Vec<Option<PooledFeature<T>>> = vec![None; samples.len()];
    for chunk in unique.chunks(CHUNK) {
        let psi = main_net.whiten_eval(&main_net.front(&images.select(chunk))?)?;
        for (b, image) in chunk.iter().enumerate() {
            for &s in &by_image[image] {
                pooled[s] = Some(weighted_pool(&samples[s].weights, psi.image(b), pool)?);
            }
        }
    }
    let mut bank = ConceptFeatureBank::new(main_net.feature_channels(), num_concepts);
    let mut fallbacks = 0;
    for (sample, p) in samples.iter().zip(pooled) {
        let p = p.expect("every sample pooled");
        fallbacks += p.fallback as usize;
        bank.push(sample.concept, p.values)?;
    }
    for k in 0..num_concepts {
        if bank.vectors(k).is_empty() {
            return Err(MaskError::EmptyConcept { concept: k });
        }
    }
    Ok(BankBuild { bank, fallbacks })
}
