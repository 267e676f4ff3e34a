//! Vector math for the shared text space and the embedding-backend contract.

use std::fmt;

use crate::corpus::text::tokenize;
use crate::Scalar;

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Default dimension of the local hashing backend.
pub const LOCAL_DEFAULT_DIM: usize = 256;

/// Smallest dimension accepted by the local hashing backend.
pub const LOCAL_MIN_DIM: usize = 16;

pub const LOCAL_BACKEND_ID: &str = "local-hash-v1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("vector has a non-finite component")]
    NonFinite,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("text {index} is empty")]
    EmptyText { index: usize },
    #[error("invalid dimension {0}")]
    InvalidDim(usize),
    #[error("backend failure at text {index}: {detail}")]
    BackendFailure { index: usize, detail: String },
}

/// Unit-norm vector with finite components.
#[derive(Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> fmt::Debug for EmbeddingVector<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingVector")
            .field("dim", &self.values.len())
            .field("values", &self.values)
            .finish()
    }
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.values)
    }
}

impl<T: Scalar> AsRef<[T]> for EmbeddingVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.values
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// `raw / ||raw||`.
pub fn normalize<T: Scalar>(raw: &[T]) -> Result<EmbeddingVector<T>, EmbedError> {
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    let norm = l2_norm(raw);
    if !norm.is_finite() || norm < T::from_f64_lossy(ZERO_NORM_EPS) {
        return Err(EmbedError::ZeroVector);
    }
    Ok(EmbeddingVector {
        values: raw.iter().map(|&x| x / norm).collect(),
    })
}

/// Converts a backend's raw `f64` output into a normalized vector of `T`.
/// Normalization happens in double precision before narrowing.
pub fn normalize_f64<T: Scalar>(raw: &[f64]) -> Result<EmbeddingVector<T>, EmbedError> {
    let unit = normalize(raw)?;
    Ok(EmbeddingVector {
        values: unit.values.into_iter().map(T::from_f64_lossy).collect(),
    })
}

/// Cosine of the angle between `a` and `b` given a precomputed dot product
/// and norms, clamped to [-1, 1].
#[inline]
pub fn cosine_from_parts<T: Scalar>(dot: T, norm_a: T, norm_b: T) -> T {
    let s = dot / (norm_a * norm_b);
    s.max(-T::one()).min(T::one())
}

/// `a·b / (||a|| ||b||)`, clamped to [-1, 1].
pub fn cosine_sim<T: Scalar>(
    a: &EmbeddingVector<T>,
    b: &EmbeddingVector<T>,
) -> Result<T, EmbedError> {
    cosine_slices(&a.values, &b.values)
}

pub fn cosine_slices<T: Scalar>(a: &[T], b: &[T]) -> Result<T, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(cosine_from_parts(dot(a, b), l2_norm(a), l2_norm(b)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub dim: usize,
    pub deterministic: bool,
}

/// Anything that maps text into the shared vector space.
///
/// Implementations return raw vectors; callers go through [`embed_text`] or
/// [`embed_batch`], which validate inputs and normalize outputs.
pub trait EmbeddingBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// One vector of `descriptor().dim` components per input, in order.
    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

pub fn embed_text<T: Scalar>(
    backend: &dyn EmbeddingBackend,
    text: &str,
) -> Result<EmbeddingVector<T>, EmbedError> {
    embed_batch(backend, &[text])?
        .pop()
        .ok_or_else(|| EmbedError::BackendFailure {
            index: 0,
            detail: "backend returned no vectors".into(),
        })
}

pub fn embed_batch<T: Scalar>(
    backend: &dyn EmbeddingBackend,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector<T>>, EmbedError> {
    if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbedError::EmptyText { index });
    }
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let raw = backend.embed_raw(texts)?;
    if raw.len() != texts.len() {
        return Err(EmbedError::BackendFailure {
            index: raw.len().min(texts.len()),
            detail: format!("expected {} vectors, got {}", texts.len(), raw.len()),
        });
    }
    let dim = backend.descriptor().dim;
    raw.iter()
        .enumerate()
        .map(|(index, v)| {
            if v.len() != dim {
                return Err(EmbedError::BackendFailure {
                    index,
                    detail: format!("expected dim {dim}, got {}", v.len()),
                });
            }
            normalize_f64(v).map_err(|e| EmbedError::BackendFailure {
                index,
                detail: e.to_string(),
            })
        })
        .collect()
}

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Bucket counts of the hashed tokens of `text`, unnormalized.
pub fn hashed_token_counts(text: &str, dim: usize) -> Vec<f64> {
    let mut counts = vec![0.0; dim];
    for token in tokenize(text) {
        let bucket = (fnv1a64(token.as_bytes()) % dim as u64) as usize;
        counts[bucket] += 1.0;
    }
    counts
}

/// Feature-hashed bag of tokens: each token adds one to bucket
/// `fnv1a64(token) mod dim`, then the vector is normalized.
pub fn local_hash_embed<T: Scalar>(
    text: &str,
    dim: usize,
) -> Result<EmbeddingVector<T>, EmbedError> {
    if dim < LOCAL_MIN_DIM {
        return Err(EmbedError::InvalidDim(dim));
    }
    let counts = hashed_token_counts(text, dim);
    normalize_f64(&counts).map_err(|_| EmbedError::EmptyText { index: 0 })
}

/// Deterministic offline backend built on [`local_hash_embed`].
#[derive(Debug, Clone)]
pub struct LocalHashBackend {
    descriptor: BackendDescriptor,
}

impl LocalHashBackend {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim < LOCAL_MIN_DIM {
            return Err(EmbedError::InvalidDim(dim));
        }
        Ok(Self {
            descriptor: BackendDescriptor {
                backend_id: LOCAL_BACKEND_ID.to_owned(),
                dim,
                deterministic: true,
            },
        })
    }
}

impl Default for LocalHashBackend {
    fn default() -> Self {
        Self::new(LOCAL_DEFAULT_DIM).expect("default dim is valid")
    }
}

impl EmbeddingBackend for LocalHashBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                let counts = hashed_token_counts(t, self.descriptor.dim);
                if counts.iter().all(|&c| c == 0.0) {
                    return Err(EmbedError::EmptyText { index });
                }
                Ok(counts)
            })
            .collect()
    }
}
