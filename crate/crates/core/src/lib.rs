//! Two-stage cross-lingual biomedical entity linking.
//!
//! A contrastively trained alias encoder retrieves candidate concepts by
//! exact dense search; a yes/no relevance scorer then reorders them.
//! Numeric cores are generic over [`scalar::Scalar`] (`f32`, `f64`); the
//! aliases below fix the common choices.

pub mod contrast;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod ingest;
pub mod kb;
pub mod matrix;
pub mod pipeline;
pub mod rerank;
pub mod scalar;
pub mod synth;
pub mod transport;

pub use error::{BelxError, Result};

/// Unit-norm alias embedding as stored in the index.
pub type Embedding = encoder::EmbeddingVector<f32>;
pub type Embedding64 = encoder::EmbeddingVector<f64>;
pub type ProjectionHead32 = contrast::ProjectionHead<f32>;
pub type ProjectionHead64 = contrast::ProjectionHead<f64>;
pub type SimilarityMatrix32 = contrast::SimilarityMatrix<f32>;
pub type SimilarityMatrix64 = contrast::SimilarityMatrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type Matrix64 = matrix::Matrix<f64>;
