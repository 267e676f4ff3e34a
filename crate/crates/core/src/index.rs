//! Exact max-over-variants vector index.
//!
//! Each image owns one contiguous block of five variant vectors. A query's
//! score for an image is the best cosine similarity within the block, and
//! search ranks every image by that score.
//!
//! Stored components are always `f32`-representable so that an index and its
//! on-disk copy score identically. Arithmetic runs in the index scalar `T`.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "TRSI"
//! version      u16      1
//! dim          u32
//! image_count  u32
//! backend_id   u32 byte length, UTF-8 bytes
//! per image:   u32 byte length, UTF-8 image id, then 5 * dim f32 values
//! crc32        u32      CRC-32 (IEEE) of every preceding byte
//! ```

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::corpus::Corpus;
use crate::embedding::{
    cosine_from_parts, dot, embed_batch, l2_norm, normalize, EmbedError, EmbeddingBackend,
    EmbeddingVector,
};
use crate::{Scalar, VARIANTS_PER_IMAGE};

pub const INDEX_MAGIC: &[u8; 4] = b"TRSI";
pub const INDEX_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, query has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("invalid index contents: {0}")]
    Invalid(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("corrupt index file: {0}")]
    CorruptIndex(String),
    #[error("index header inconsistent with payload: {0}")]
    DimMismatch(String),
    #[error("index file not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Borrowed view of one stored variant.
#[derive(Debug, Clone, Copy)]
pub struct IndexEntry<'a, T> {
    pub image_ordinal: usize,
    pub image_id: &'a str,
    pub variant_id: u8,
    pub vector: &'a [T],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit<T> {
    pub image_id: String,
    pub image_ordinal: usize,
    pub score: T,
    pub best_variant_id: u8,
}

/// Images ordered by descending score, ties by ascending ordinal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedResult<T> {
    pub hits: Vec<Hit<T>>,
}

impl<T> RankedResult<T> {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.image_id.as_str())
    }

    /// 1-based rank of `image_id`, if present.
    pub fn rank_of(&self, image_id: &str) -> Option<usize> {
        self.ids().position(|id| id == image_id).map(|p| p + 1)
    }
}

/// One caption-level hit, used by the caption-pool evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryHit<T> {
    pub image_id: String,
    pub image_ordinal: usize,
    pub variant_id: u8,
    pub score: T,
}

/// Best cosine similarity of `query` over an image's variant vectors.
///
/// Returns the score and the 1-based variant id achieving it; exact ties go to
/// the lowest variant id.
pub fn score_image<T: Scalar>(query: &[T], variants: &[&[T]]) -> Result<(T, u8), IndexError> {
    let qn = l2_norm(query);
    let mut best: Option<(T, u8)> = None;
    for (i, v) in variants.iter().enumerate() {
        if v.len() != query.len() {
            return Err(IndexError::DimensionMismatch {
                expected: v.len(),
                found: query.len(),
            });
        }
        let s = cosine_from_parts(dot(query, v), qn, l2_norm(v));
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, (i + 1) as u8));
        }
    }
    best.ok_or(IndexError::EmptyIndex)
}

/// Descending score, then ascending ordinal.
fn rank_order<T: Scalar>(a: (T, usize), b: (T, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

fn top_k_by<E, F: Fn(&E, &E) -> Ordering>(mut items: Vec<E>, k: usize, cmp: F) -> Vec<E> {
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, &cmp);
        items.truncate(k);
    }
    items.sort_unstable_by(cmp);
    items
}

/// Immutable index of five normalized caption vectors per image.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex<T> {
    dim: usize,
    backend_id: String,
    image_ids: Vec<String>,
    // image-major, then variant, then component
    vectors: Vec<T>,
    norms: Vec<T>,
    ordinals: HashMap<String, usize>,
}

impl<T: Scalar> VectorIndex<T> {
    /// Builds an index from already-embedded variant vectors laid out
    /// image-major (`image_ids.len() * 5 * dim` values). Each vector is
    /// normalized and rounded to `f32` precision.
    pub fn from_vectors(
        backend_id: impl Into<String>,
        dim: usize,
        image_ids: Vec<String>,
        vectors: &[T],
    ) -> Result<Self, IndexError> {
        if dim == 0 {
            return Err(IndexError::Invalid("dim must be positive".into()));
        }
        let expected = image_ids.len() * VARIANTS_PER_IMAGE * dim;
        if vectors.len() != expected {
            return Err(IndexError::Invalid(format!(
                "expected {expected} components, got {}",
                vectors.len()
            )));
        }
        let mut stored = Vec::with_capacity(expected);
        for chunk in vectors.chunks_exact(dim) {
            let unit = normalize(chunk)?;
            stored.extend(unit.as_slice().iter().map(|x| x.round_to_f32()));
        }
        Self::from_stored(backend_id.into(), dim, image_ids, stored)
    }

    fn from_stored(
        backend_id: String,
        dim: usize,
        image_ids: Vec<String>,
        vectors: Vec<T>,
    ) -> Result<Self, IndexError> {
        let mut ordinals = HashMap::with_capacity(image_ids.len());
        for (ordinal, id) in image_ids.iter().enumerate() {
            if id.is_empty() || ordinals.insert(id.clone(), ordinal).is_some() {
                return Err(IndexError::Invalid(format!(
                    "bad or duplicate image id {id:?}"
                )));
            }
        }
        if vectors.iter().any(|x| !x.is_finite()) {
            return Err(IndexError::Invalid("non-finite component".into()));
        }
        let norms = vectors.chunks_exact(dim).map(l2_norm).collect();
        Ok(Self {
            dim,
            backend_id,
            image_ids,
            vectors,
            norms,
            ordinals,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn image_count(&self) -> usize {
        self.image_ids.len()
    }

    pub fn entry_count(&self) -> usize {
        self.norms.len()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn ordinal_of(&self, image_id: &str) -> Option<usize> {
        self.ordinals.get(image_id).copied()
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.ordinal_of(image_id).is_some()
    }

    /// Stored vector of `variant_id` (1-based) for the image at `ordinal`.
    pub fn vector(&self, ordinal: usize, variant_id: u8) -> &[T] {
        let slot = ordinal * VARIANTS_PER_IMAGE + usize::from(variant_id) - 1;
        &self.vectors[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn entries(&self) -> impl Iterator<Item = IndexEntry<'_, T>> {
        (0..self.image_count()).flat_map(move |ordinal| {
            (1..=VARIANTS_PER_IMAGE as u8).map(move |variant_id| IndexEntry {
                image_ordinal: ordinal,
                image_id: &self.image_ids[ordinal],
                variant_id,
                vector: self.vector(ordinal, variant_id),
            })
        })
    }

    fn check_query(&self, query: &EmbeddingVector<T>, k: usize) -> Result<(), IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        if self.image_ids.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        Ok(())
    }

    fn score_block(&self, q: &[T], qn: T, ordinal: usize) -> (T, u8) {
        let base = ordinal * VARIANTS_PER_IMAGE;
        let mut best = (T::neg_infinity(), 1u8);
        for v in 0..VARIANTS_PER_IMAGE {
            let slot = base + v;
            let vec = &self.vectors[slot * self.dim..(slot + 1) * self.dim];
            let s = cosine_from_parts(dot(q, vec), qn, self.norms[slot]);
            if s > best.0 {
                best = (s, (v + 1) as u8);
            }
        }
        best
    }

    /// Scores every image against `query` and returns the best `k`.
    pub fn search(
        &self,
        query: &EmbeddingVector<T>,
        k: usize,
    ) -> Result<RankedResult<T>, IndexError> {
        self.check_query(query, k)?;
        let q = query.as_slice();
        let qn = l2_norm(q);
        let scored: Vec<(T, usize, u8)> = (0..self.image_count())
            .map(|ordinal| {
                let (s, v) = self.score_block(q, qn, ordinal);
                (s, ordinal, v)
            })
            .collect();
        let top = top_k_by(scored, k, |a, b| rank_order((a.0, a.1), (b.0, b.1)));
        Ok(RankedResult {
            hits: top
                .into_iter()
                .map(|(score, ordinal, best_variant_id)| Hit {
                    image_id: self.image_ids[ordinal].clone(),
                    image_ordinal: ordinal,
                    score,
                    best_variant_id,
                })
                .collect(),
        })
    }

    /// Ranks individual caption variants rather than images.
    pub fn search_entries(
        &self,
        query: &EmbeddingVector<T>,
        k: usize,
    ) -> Result<Vec<EntryHit<T>>, IndexError> {
        self.check_query(query, k)?;
        let q = query.as_slice();
        let qn = l2_norm(q);
        let scored: Vec<(T, usize)> = self
            .norms
            .iter()
            .enumerate()
            .map(|(slot, &n)| {
                let vec = &self.vectors[slot * self.dim..(slot + 1) * self.dim];
                (cosine_from_parts(dot(q, vec), qn, n), slot)
            })
            .collect();
        let top = top_k_by(scored, k, |a, b| rank_order(*a, *b));
        Ok(top
            .into_iter()
            .map(|(score, slot)| {
                let ordinal = slot / VARIANTS_PER_IMAGE;
                EntryHit {
                    image_id: self.image_ids[ordinal].clone(),
                    image_ordinal: ordinal,
                    variant_id: (slot % VARIANTS_PER_IMAGE + 1) as u8,
                    score,
                }
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.vectors.len() * 4 + 64);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.image_count() as u32).to_le_bytes());
        put_str(&mut out, &self.backend_id);
        let block = VARIANTS_PER_IMAGE * self.dim;
        for (id, vecs) in self.image_ids.iter().zip(self.vectors.chunks_exact(block)) {
            put_str(&mut out, id);
            for x in vecs {
                out.extend_from_slice(&x.to_f32_lossy().to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let corrupt = |m: &str| IndexError::CorruptIndex(m.to_owned());
        if bytes.len() < 4 || &bytes[..4] != INDEX_MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes.len() < 4 + 2 + 4 + 4 + 4 + 4 {
            return Err(corrupt("truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored_crc {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != INDEX_VERSION {
            return Err(IndexError::CorruptIndex(format!(
                "unsupported version {version}"
            )));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        if dim == 0 {
            return Err(IndexError::DimMismatch("dim is zero".into()));
        }
        let backend_id = r.string()?;
        let block = VARIANTS_PER_IMAGE * dim;
        let mut image_ids = Vec::with_capacity(count.min(1 << 20));
        let mut vectors = Vec::with_capacity(count.saturating_mul(block).min(1 << 26));
        for _ in 0..count {
            image_ids.push(r.string()?);
            let raw = r.take(block * 4)?;
            vectors.extend(
                raw.chunks_exact(4)
                    .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64)),
            );
        }
        if r.pos != body.len() {
            return Err(IndexError::DimMismatch(format!(
                "{} trailing bytes after {count} images of dim {dim}",
                body.len() - r.pos
            )));
        }
        Self::from_stored(backend_id, dim, image_ids, vectors)
            .map_err(|e| IndexError::CorruptIndex(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => IndexError::NotFound(path.display().to_string()),
            _ => IndexError::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                IndexError::DimMismatch("payload shorter than header declares".into())
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, IndexError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| IndexError::CorruptIndex("string is not UTF-8".into()))
    }
}

/// Embeds every caption variant of `corpus` in corpus order.
pub fn build_index<T: Scalar>(
    corpus: &Corpus,
    backend: &dyn EmbeddingBackend,
) -> Result<VectorIndex<T>, IndexError> {
    if corpus.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let desc = backend.descriptor();
    let texts: Vec<&str> = corpus.entries().iter().flat_map(|e| e.texts()).collect();
    let embedded = embed_batch::<T>(backend, &texts)?;
    let mut flat = Vec::with_capacity(texts.len() * desc.dim);
    for v in &embedded {
        flat.extend_from_slice(v.as_slice());
    }
    let ids = corpus
        .entries()
        .iter()
        .map(|e| e.image_id().to_owned())
        .collect();
    VectorIndex::from_vectors(desc.backend_id.clone(), desc.dim, ids, &flat)
}
