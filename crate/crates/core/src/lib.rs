//! Training-free cross-modal image retrieval recast as text-to-text matching.
//!
//! Every image in a corpus is described by five caption variants. All
//! variants are embedded into one text space, and an image's relevance to a
//! query is the maximum cosine similarity over its variants. Image queries are
//! first turned into text by a captioner backend, so both retrieval
//! directions share the same scoring path.
//!
//! The vector math is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the double-precision instantiation used by the tooling.

pub mod backends;
pub mod corpus;
pub mod embedding;
pub mod evalharness;
pub mod index;
pub mod retrieval;
mod scalar;

pub use scalar::Scalar;

/// Unit-norm embedding in double precision.
pub type Embedding = embedding::EmbeddingVector<f64>;
/// Exact max-over-variants index with double-precision scoring.
pub type Index = index::VectorIndex<f64>;
/// Ranked images with double-precision scores.
pub type Ranking = index::RankedResult<f64>;
/// Retrieval outcome with double-precision scores.
pub type Outcome = retrieval::RetrievalOutcome<f64>;

/// Number of caption variants attached to every image.
pub const VARIANTS_PER_IMAGE: usize = 5;
