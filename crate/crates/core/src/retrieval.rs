//! Text-to-image and image-to-text query flows.
//!
//! An image query is captioned first; from there both directions embed a
//! text, then run the same max-over-variants search.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::backends::{CaptionError, CaptionerBackend};
use crate::embedding::{embed_text, EmbedError, EmbeddingBackend};
use crate::index::{IndexError, RankedResult, VectorIndex};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("query text is empty")]
    EmptyText,
    #[error("query backend {query:?} (dim {query_dim}) does not match index backend {index:?} (dim {index_dim})")]
    BackendMismatch {
        index: String,
        index_dim: usize,
        query: String,
        query_dim: usize,
    },
    #[error("image not found: {0}")]
    FileNotFound(String),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Query {
    pub mode: QueryMode,
    /// Query text, or image path for image queries.
    pub payload: String,
    pub k: usize,
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption_ms: Option<f64>,
    pub embed_ms: f64,
    pub search_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalOutcome<T> {
    pub query: Query,
    /// Caption produced for an image query; absent for text queries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_query_text: Option<String>,
    pub results: RankedResult<T>,
    pub timing: StageTimings,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Fails unless `backend` produced the vectors stored in `index`.
pub fn check_backend<T: Scalar>(
    index: &VectorIndex<T>,
    backend: &dyn EmbeddingBackend,
) -> Result<(), RetrievalError> {
    let d = backend.descriptor();
    if d.backend_id != index.backend_id() || d.dim != index.dim() {
        return Err(RetrievalError::BackendMismatch {
            index: index.backend_id().to_owned(),
            index_dim: index.dim(),
            query: d.backend_id.clone(),
            query_dim: d.dim,
        });
    }
    Ok(())
}

fn search_text<T: Scalar>(
    index: &VectorIndex<T>,
    backend: &dyn EmbeddingBackend,
    text: &str,
    k: usize,
    timing: &mut StageTimings,
) -> Result<RankedResult<T>, RetrievalError> {
    if text.trim().is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    check_backend(index, backend)?;
    let t = Instant::now();
    let query = embed_text::<T>(backend, text)?;
    timing.embed_ms = elapsed_ms(t);
    let t = Instant::now();
    let results = index.search(&query, k)?;
    timing.search_ms = elapsed_ms(t);
    Ok(results)
}

/// Ranks images by their best-matching caption variant for a text query.
pub fn t2i_retrieve<T: Scalar>(
    index: &VectorIndex<T>,
    backend: &dyn EmbeddingBackend,
    text: &str,
    k: usize,
) -> Result<RetrievalOutcome<T>, RetrievalError> {
    let mut timing = StageTimings::default();
    let results = search_text(index, backend, text, k, &mut timing)?;
    Ok(RetrievalOutcome {
        query: Query {
            mode: QueryMode::Text,
            payload: text.to_owned(),
            k,
        },
        generated_query_text: None,
        results,
        timing,
    })
}

/// Captions `image_path` with `prompt`, then proceeds as a text query.
pub fn i2t_retrieve<T: Scalar>(
    index: &VectorIndex<T>,
    backend: &dyn EmbeddingBackend,
    captioner: &dyn CaptionerBackend,
    image_path: &Path,
    prompt: &str,
    k: usize,
) -> Result<RetrievalOutcome<T>, RetrievalError> {
    if !image_path.exists() {
        return Err(RetrievalError::FileNotFound(
            image_path.display().to_string(),
        ));
    }
    check_backend(index, backend)?;
    let mut timing = StageTimings::default();
    let t = Instant::now();
    let caption = captioner.caption(image_path, prompt)?;
    timing.caption_ms = Some(elapsed_ms(t));
    if caption.trim().is_empty() {
        return Err(CaptionError::EmptyCaption.into());
    }
    let results = search_text(index, backend, &caption, k, &mut timing)?;
    Ok(RetrievalOutcome {
        query: Query {
            mode: QueryMode::Image,
            payload: image_path.display().to_string(),
            k,
        },
        generated_query_text: Some(caption),
        results,
        timing,
    })
}
