use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use super::cache::{sha256_hex, CacheKey, DiskCache};
use super::transport::Transport;
use super::{send_with_retry, Attempt, BackendError, RemoteServiceConfig, Sleeper, ThreadSleeper};
use crate::embedding::{
    normalize_f64, BackendDescriptor, EmbedError, EmbeddingBackend, EmbeddingVector,
};
use crate::Scalar;

type ChunkResult = Result<Vec<Vec<f64>>, BackendError>;

/// Embedding client for services speaking the embeddings wire format.
pub struct RemoteEmbedder {
    config: RemoteServiceConfig,
    descriptor: BackendDescriptor,
    transport: Arc<dyn Transport>,
    sleeper: Arc<dyn Sleeper>,
    cache: Option<DiskCache>,
    requests: AtomicUsize,
    attempts: Mutex<Vec<Attempt>>,
}

impl RemoteEmbedder {
    pub fn new(
        config: RemoteServiceConfig,
        transport: Arc<dyn Transport>,
        cache: Option<DiskCache>,
    ) -> Result<Self, BackendError> {
        config.validate()?;
        let dim = config
            .dim
            .filter(|&d| d > 0)
            .ok_or_else(|| BackendError::Config("embedding dim must be set".into()))?;
        Ok(Self {
            descriptor: BackendDescriptor {
                backend_id: format!("remote:{}", config.model_name),
                dim,
                deterministic: true,
            },
            config,
            transport,
            sleeper: Arc::new(ThreadSleeper),
            cache,
            requests: AtomicUsize::new(0),
            attempts: Mutex::new(Vec::new()),
        })
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn config(&self) -> &RemoteServiceConfig {
        &self.config
    }

    /// Logical requests issued (one per chunk, retries excluded).
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Every HTTP attempt so far.
    pub fn attempts(&self) -> Vec<Attempt> {
        self.attempts.lock().unwrap().clone()
    }

    fn cache_key(&self, text: &str) -> CacheKey {
        CacheKey {
            backend_id: self.descriptor.backend_id.clone(),
            model_name: self.config.model_name.clone(),
            content_hash: sha256_hex(text.as_bytes()),
        }
    }

    fn parse_response(&self, body: &[u8], expected: usize) -> Result<Vec<Vec<f64>>, BackendError> {
        let schema = &self.config.schema;
        let bad = |m: String| BackendError::ServiceError {
            status: 200,
            body: m,
        };
        let v: Value =
            serde_json::from_slice(body).map_err(|e| bad(format!("invalid JSON: {e}")))?;
        let data = v
            .get(&schema.data_field)
            .and_then(Value::as_array)
            .ok_or_else(|| bad(format!("missing {:?} array", schema.data_field)))?;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; expected];
        for (pos, item) in data.iter().enumerate() {
            let idx = match item.get(&schema.index_field) {
                Some(i) => i.as_u64().ok_or_else(|| bad("non-integer index".into()))? as usize,
                None => pos,
            };
            let emb = item
                .get(&schema.embedding_field)
                .and_then(Value::as_array)
                .ok_or_else(|| bad(format!("item {pos} has no embedding")))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| bad("non-numeric component".into()))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let slot = out
                .get_mut(idx)
                .ok_or_else(|| bad(format!("index {idx} out of range")))?;
            if slot.replace(emb).is_some() {
                return Err(bad(format!("index {idx} repeated")));
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| bad(format!("no embedding for index {i}"))))
            .collect()
    }

    fn request_chunk(
        &self,
        chunk_no: usize,
        texts: &[&str],
    ) -> Result<Vec<Vec<f64>>, BackendError> {
        let request = self.requests.fetch_add(1, Ordering::SeqCst);
        let schema = &self.config.schema;
        let mut body = serde_json::Map::new();
        body.insert("model".into(), json!(self.config.model_name));
        body.insert(schema.input_field.clone(), json!(texts));
        let body = serde_json::to_vec(&Value::Object(body)).expect("request serializes");
        let url = self.config.url(&schema.path);
        send_with_retry(
            &self.config,
            self.transport.as_ref(),
            self.sleeper.as_ref(),
            &url,
            &body,
            chunk_no as u64,
            |attempt, status| {
                self.attempts.lock().unwrap().push(Attempt {
                    request,
                    attempt,
                    status,
                })
            },
            |b| self.parse_response(b, texts.len()),
        )
    }

    /// Raw vectors for `texts`, served from cache where possible. On failure
    /// returns the input index of the first text in the failing chunk.
    fn fetch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, (usize, BackendError)> {
        let mut results: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        // unique uncached texts, first occurrence order
        let mut pending: Vec<&str> = Vec::new();
        let mut first_index: HashMap<&str, usize> = HashMap::new();
        for (i, &t) in texts.iter().enumerate() {
            if let Some(hit) = self
                .cache
                .as_ref()
                .and_then(|c| c.get::<Vec<f64>>(&self.cache_key(t)))
            {
                results[i] = Some(hit.payload);
            } else if !first_index.contains_key(t) {
                first_index.insert(t, i);
                pending.push(t);
            }
        }

        let chunks: Vec<&[&str]> = pending.chunks(self.config.max_batch).collect();
        let fetched: Vec<Mutex<Option<ChunkResult>>> =
            chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.permits.min(chunks.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let c = next.fetch_add(1, Ordering::SeqCst);
                    if c >= chunks.len() {
                        break;
                    }
                    let r = self.request_chunk(c, chunks[c]);
                    let failed = r.is_err();
                    *fetched[c].lock().unwrap() = Some(r);
                    if failed {
                        // stop handing out new chunks
                        next.store(chunks.len(), Ordering::SeqCst);
                    }
                });
            }
        });

        let mut by_text: HashMap<&str, Vec<f64>> = HashMap::new();
        for (chunk, slot) in chunks.iter().zip(fetched) {
            match slot.into_inner().unwrap() {
                Some(Ok(vectors)) => {
                    for (&t, v) in chunk.iter().zip(vectors) {
                        if let Some(c) = &self.cache {
                            c.put(&self.cache_key(t), &v).map_err(|e| {
                                (first_index[t], BackendError::Cache(e.to_string()))
                            })?;
                        }
                        by_text.insert(t, v);
                    }
                }
                Some(Err(e)) => return Err((first_index[chunk[0]], e)),
                None => {}
            }
        }
        // a chunk skipped after an earlier failure is only possible on error
        texts
            .iter()
            .zip(results)
            .enumerate()
            .map(|(i, (t, r))| {
                r.or_else(|| by_text.get(t).cloned()).ok_or((
                    i,
                    BackendError::ServiceError {
                        status: 0,
                        body: "request abandoned".into(),
                    },
                ))
            })
            .collect()
    }
}

impl EmbeddingBackend for RemoteEmbedder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        self.fetch(texts)
            .map_err(|(index, e)| EmbedError::BackendFailure {
                index,
                detail: e.to_string(),
            })
    }
}

/// Embeds `texts` through `embedder`, normalizing every vector on receipt.
pub fn remote_embed<T: Scalar>(
    embedder: &RemoteEmbedder,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector<T>>, BackendError> {
    let raw = embedder.fetch(texts).map_err(|(_, e)| e)?;
    raw.iter()
        .map(|v| {
            if v.len() != embedder.descriptor.dim {
                return Err(BackendError::ServiceError {
                    status: 200,
                    body: format!("expected dim {}, got {}", embedder.descriptor.dim, v.len()),
                });
            }
            normalize_f64(v).map_err(|e| BackendError::ServiceError {
                status: 200,
                body: e.to_string(),
            })
        })
        .collect()
}
