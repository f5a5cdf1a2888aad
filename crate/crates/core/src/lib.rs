//! Concept-attention whitening for a small convolutional classifier.
//!
//! A CAW layer whitens intermediate features (ZCA) and rotates them with an
//! orthogonal matrix `Q` whose first `K` columns are aligned, by Cayley steps,
//! with features pooled under weakly supervised concept masks. After
//! training, latent channel `k` reads as a detector for concept `k`.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod grid;
pub mod linalg;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pnm;
mod scalar;
pub mod stiefel;
pub mod synth;
pub mod tensor;
pub mod whitening;

pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type FeatureTensor64 = tensor::FeatureTensor<f64>;
pub type FeatureTensor32 = tensor::FeatureTensor<f32>;
pub type TinyNet64 = nn::TinyNet<f64>;
pub type TinyNet32 = nn::TinyNet<f32>;
pub type WhiteningState64 = whitening::WhiteningState<f64>;
pub type OrthogonalBasis64 = stiefel::OrthogonalBasis<f64>;
pub type ConceptFeatureBank64 = stiefel::ConceptFeatureBank<f64>;
pub type PrototypeMatrix64 = mask::PrototypeMatrix<f64>;
