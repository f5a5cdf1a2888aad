//! Deterministic synthetic concept images with pixel-true concept regions.
//!
//! Four concepts, each a shape with its own colour: a red filled disc, a green
//! horizontal stripe, a blue square outline and a yellow checker patch. Disease
//! is positive iff concept 1 is present, or concepts 2 and 3 both are.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::BitGrid;
use crate::tensor::FeatureTensor;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("could not place concept {concept} without overlap after {retries} retries (image side {size})")]
    Placement {
        concept: usize,
        retries: usize,
        size: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const MAX_CONCEPTS: usize = 4;
const PLACEMENT_RETRIES: usize = 100;
pub const BACKGROUND: [u8; 3] = [110, 110, 110];
pub const CONCEPT_COLORS: [[u8; 3]; MAX_CONCEPTS] =
    [[220, 40, 40], [40, 200, 40], [40, 60, 230], [230, 210, 40]];
pub const CONCEPT_NAMES: [&str; MAX_CONCEPTS] = [
    "filled_disc",
    "horizontal_stripe",
    "square_outline",
    "checker_patch",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    pub num_concepts: usize,
    pub concept_probs: Vec<f64>,
    /// Pixel noise standard deviation in `[0, 1]` intensity units.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_concepts: 4,
            concept_probs: vec![0.5; 4],
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CONCEPTS).contains(&self.num_concepts) {
            return Err(SynthError::InvalidSpec(format!(
                "num_concepts must be in 2..={MAX_CONCEPTS}, got {}",
                self.num_concepts
            )));
        }
        if self.concept_probs.len() != self.num_concepts {
            return Err(SynthError::InvalidSpec(format!(
                "{} concept probabilities for {} concepts",
                self.concept_probs.len(),
                self.num_concepts
            )));
        }
        if let Some(p) = self
            .concept_probs
            .iter()
            .find(|p| !(**p > 0.0 && **p < 1.0))
        {
            return Err(SynthError::InvalidSpec(format!(
                "probability {p} outside (0, 1)"
            )));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(SynthError::InvalidSpec(format!(
                "image_size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SynthError::InvalidSpec(format!(
                "noise_std {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// 8-bit RGB image, pixels interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> [u8; 3] {
        let o = (i * self.width + j) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    fn put(&mut self, i: usize, j: usize, c: [u8; 3]) {
        let o = (i * self.width + j) * 3;
        self.pixels[o..o + 3].copy_from_slice(&c);
    }

    /// Planar `3 × h × w` intensities in `[0, 1]`.
    pub fn to_planar<T: Scalar>(&self) -> Vec<T> {
        let hw = self.width * self.height;
        let mut out = vec![T::zero(); 3 * hw];
        let scale = T::one() / T::of(255.0);
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = T::of(self.pixels[p * 3 + c] as f64) * scale;
            }
        }
        out
    }
}

/// Stacks images into an `n × 3 × h × w` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&RgbImage]) -> FeatureTensor<T> {
    let (h, w) = images.first().map_or((0, 0), |im| (im.height, im.width));
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        assert_eq!((im.height, im.width), (h, w), "images must share a size");
        data.extend(im.to_planar::<T>());
    }
    FeatureTensor::from_vec(images.len(), 3, h, w, data).expect("consistent sizes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: RgbImage,
    pub concepts: Vec<bool>,
    pub disease: usize,
    /// One grid per concept, empty where the concept is absent.
    pub true_masks: Vec<BitGrid>,
}

/// Disease label implied by concept presence.
pub fn disease_rule(concepts: &[bool]) -> usize {
    let c = |k: usize| concepts.get(k).copied().unwrap_or(false);
    (c(0) || (c(1) && c(2))) as usize
}

/// Bounding-box size `(height, width)` of each concept shape at a given image side.
pub fn shape_extent(concept: usize, size: usize) -> (usize, usize) {
    match concept {
        0 => {
            let d = 2 * (size / 6) + 1;
            (d, d)
        }
        1 => (size / 8, size * 7 / 16),
        2 => (size * 5 / 16, size * 5 / 16),
        _ => (size / 4, size / 4),
    }
}

/// Whether pixel `(i, j)` of the shape's bounding box is painted.
fn shape_covers(concept: usize, size: usize, i: usize, j: usize) -> bool {
    let (h, w) = shape_extent(concept, size);
    match concept {
        0 => {
            let r = (h / 2) as isize;
            let (di, dj) = (i as isize - r, j as isize - r);
            di * di + dj * dj <= r * r
        }
        1 => true,
        2 => {
            let t = (size / 16).max(1);
            i < t || j < t || i >= h - t || j >= w - t
        }
        _ => {
            let cell = (size / 16).max(1);
            (i / cell + j / cell) % 2 == 0
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

impl Rect {
    // One pixel of clearance so true masks never touch.
    fn clashes(&self, o: &Rect) -> bool {
        self.top < o.top + o.h + 1
            && o.top < self.top + self.h + 1
            && self.left < o.left + o.w + 1
            && o.left < self.left + self.w + 1
    }
}

/// Draws uniformly among the clash-free positions of an `h × w` box.
fn place(
    concept: usize,
    (h, w): (usize, usize),
    size: usize,
    placed: &[Rect],
    rng: &mut impl Rng,
) -> Result<Rect> {
    let err = SynthError::Placement {
        concept,
        retries: PLACEMENT_RETRIES,
        size,
    };
    if h > size || w > size {
        return Err(err);
    }
    let free: Vec<Rect> = (0..=size - h)
        .flat_map(|top| (0..=size - w).map(move |left| Rect { top, left, h, w }))
        .filter(|r| !placed.iter().any(|p| p.clashes(r)))
        .collect();
    if free.is_empty() {
        return Err(err);
    }
    Ok(free[rng.gen_range(0..free.len())])
}

/// Places every present concept, restarting the whole layout when one no longer fits.
fn layout(present: &[bool], size: usize, rng: &mut impl Rng) -> Result<Vec<(usize, Rect)>> {
    let mut last = None;
    for _ in 0..PLACEMENT_RETRIES {
        let mut placed: Vec<Rect> = Vec::new();
        let mut out = Vec::new();
        let attempt = present
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .try_for_each(|(k, _)| {
                let r = place(k, shape_extent(k, size), size, &placed, rng)?;
                placed.push(r);
                out.push((k, r));
                Ok(())
            });
        match attempt {
            Ok(()) => return Ok(out),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Renders one sample with the given concepts present, drawing placement and noise from `rng`.
pub fn render_sample(
    spec: &SynthSpec,
    present: &[bool],
    rng: &mut impl Rng,
) -> Result<SynthSample> {
    let size = spec.image_size;
    let mut image = RgbImage::filled(size, size, BACKGROUND);
    let mut true_masks = vec![BitGrid::empty(size, size); spec.num_concepts];
    for (k, rect) in layout(present, size, rng)? {
        let (h, w) = (rect.h, rect.w);
        for i in 0..h {
            for j in 0..w {
                if shape_covers(k, size, i, j) {
                    image.put(rect.top + i, rect.left + j, CONCEPT_COLORS[k]);
                    true_masks[k].set(rect.top + i, rect.left + j, true);
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise");
        for px in image.pixels.iter_mut() {
            let v = *px as f64 / 255.0 + noise.sample(rng);
            *px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(SynthSample {
        image,
        concepts: present.to_vec(),
        disease: disease_rule(present),
        true_masks,
    })
}

/// Per-sample generator stream; sample `i` only depends on `(seed, i)`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate_one(spec: &SynthSpec, index: usize) -> Result<SynthSample> {
    let mut rng = sample_rng(spec.seed, index);
    let present: Vec<bool> = spec
        .concept_probs
        .iter()
        .map(|&p| rng.gen_bool(p))
        .collect();
    render_sample(spec, &present, &mut rng)
}

/// `n` i.i.d. samples, deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec, n: usize) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(SynthError::InvalidSpec(
            "sample count must be at least 1".into(),
        ));
    }
    (0..n).map(|i| generate_one(spec, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Disjoint train/val/test index sets from a seeded shuffle of `0..n`.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(SynthError::BadFractions(fractions));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_train = ((n as f64) * fractions[0]).round() as usize;
    let n_val = (((n as f64) * fractions[1]).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split {
        train: order,
        val,
        test,
    })
}
