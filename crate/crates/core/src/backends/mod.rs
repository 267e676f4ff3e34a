//! Clients for remote embedding and captioning services.
//!
//! Both clients speak JSON over HTTP(S) with bearer-token auth, retry
//! transient failures with exponential backoff, and write every result
//! through a content-addressed on-disk cache. HTTP itself sits behind the
//! [`Transport`] trait so the retry and batching logic can be exercised
//! against in-process fakes.
//!
//! Embedding request (`POST {base_url}/embeddings`):
//!
//! ```text
//! {"model": "<model_name>", "input": ["text 0", "text 1", ...]}
//! ```
//!
//! Embedding response:
//!
//! ```text
//! {"data": [{"index": 0, "embedding": [f, f, ...]}, ...]}
//! ```
//!
//! The field names are configurable through [`EmbeddingSchema`].

mod cache;
mod caption;
mod embed;
mod transport;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::fnv1a64;

pub use cache::{sha256_hex, CacheEntry, CacheKey, DiskCache};
pub use caption::{
    fixture_captioner, remote_caption, CaptionError, CaptionerBackend, FixtureCaptioner,
    RemoteCaptioner, DEFAULT_QUERY_PROMPT,
};
pub use embed::{remote_embed, RemoteEmbedder};
pub use transport::{HttpResponse, ReqwestTransport, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("service error {status}: {body}")]
    ServiceError { status: u16, body: String },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cache I/O: {0}")]
    Cache(String),
}

/// Field names of the embeddings wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSchema {
    pub path: String,
    pub input_field: String,
    pub data_field: String,
    pub index_field: String,
    pub embedding_field: String,
}

impl Default for EmbeddingSchema {
    fn default() -> Self {
        Self {
            path: "/embeddings".into(),
            input_field: "input".into(),
            data_field: "data".into(),
            index_field: "index".into(),
            embedding_field: "embedding".into(),
        }
    }
}

/// Connection settings for one remote model.
///
/// `api_key_env` names the environment variable holding the credential; the
/// credential itself is read at request time and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteServiceConfig {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub max_batch: usize,
    /// Seconds.
    pub timeout: f64,
    pub max_retries: u32,
    /// Concurrent in-flight requests.
    pub permits: usize,
    /// Embedding dimension; required for embedding services.
    pub dim: Option<usize>,
    pub backoff_base: f64,
    pub backoff_factor: f64,
    /// Decoding settings for captioning services.
    pub temperature: f64,
    pub max_tokens: u32,
    pub caption_path: String,
    pub schema: EmbeddingSchema,
}

impl Default for RemoteServiceConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model_name: String::new(),
            api_key_env: "EMBEDDING_API_KEY".into(),
            max_batch: 128,
            timeout: 60.0,
            max_retries: 3,
            permits: 4,
            dim: None,
            backoff_base: 0.5,
            backoff_factor: 2.0,
            temperature: 0.0,
            max_tokens: 512,
            caption_path: "/chat/completions".into(),
            schema: EmbeddingSchema::default(),
        }
    }
}

impl RemoteServiceConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.to_owned()));
        if self.base_url.is_empty() {
            return bad("base_url is empty");
        }
        if self.model_name.is_empty() {
            return bad("model_name is empty");
        }
        if self.api_key_env.is_empty() {
            return bad("api_key_env is empty");
        }
        if self.max_batch == 0 {
            return bad("max_batch must be at least 1");
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return bad("timeout must be positive");
        }
        if self.permits == 0 {
            return bad("permits must be at least 1");
        }
        if !(self.backoff_base >= 0.0 && self.backoff_factor >= 1.0) {
            return bad("backoff must be non-negative and non-shrinking");
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout)
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }

    /// Reads the credential from the configured environment variable.
    pub fn credential(&self) -> Result<String, BackendError> {
        match std::env::var(&self.api_key_env) {
            Ok(k) if !k.is_empty() => Ok(k),
            _ => Err(BackendError::AuthError(format!(
                "environment variable {} is not set",
                self.api_key_env
            ))),
        }
    }

    /// Delay before retry number `attempt + 1`.
    ///
    /// Jitter adds up to 25% and is derived from `(salt, attempt)` rather than
    /// an RNG, so a rerun waits exactly as long.
    pub fn backoff(&self, attempt: u32, salt: u64) -> Duration {
        let base = self.backoff_base * self.backoff_factor.powi(attempt as i32);
        let mut key = salt.to_le_bytes().to_vec();
        key.extend_from_slice(&attempt.to_le_bytes());
        let jitter = (fnv1a64(&key) % 1000) as f64 / 4000.0;
        Duration::from_secs_f64(base * (1.0 + jitter))
    }
}

/// Something that can wait; swapped out in tests.
pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// One HTTP attempt, as recorded by the clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attempt {
    pub request: usize,
    pub attempt: u32,
    /// HTTP status, or `None` when the transport failed.
    pub status: Option<u16>,
}

/// Drops the credential from anything that might be shown to a user and
/// keeps at most 200 characters.
fn excerpt(body: &[u8], secret: &str) -> String {
    let mut s = String::from_utf8_lossy(body).into_owned();
    if !secret.is_empty() {
        s = s.replace(secret, "***");
    }
    if s.chars().count() > 200 {
        s = s.chars().take(200).collect::<String>() + "...";
    }
    s
}

enum Verdict<T> {
    Done(T),
    Retry(BackendError),
    Fail(BackendError),
}

/// Sends `body` until it succeeds, fails permanently, or exhausts retries.
#[allow(clippy::too_many_arguments)]
fn send_with_retry<T>(
    config: &RemoteServiceConfig,
    transport: &dyn Transport,
    sleeper: &dyn Sleeper,
    url: &str,
    body: &[u8],
    salt: u64,
    mut record: impl FnMut(u32, Option<u16>),
    parse: impl Fn(&[u8]) -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let key = config.credential()?;
    let mut attempt = 0u32;
    loop {
        let verdict = match transport.post_json(url, &key, body, config.timeout()) {
            Ok(resp) => {
                record(attempt, Some(resp.status));
                match resp.status {
                    200..=299 => match parse(&resp.body) {
                        Ok(v) => Verdict::Done(v),
                        Err(e) => Verdict::Fail(e),
                    },
                    401 | 403 => Verdict::Fail(BackendError::AuthError(format!(
                        "status {}: {}",
                        resp.status,
                        excerpt(&resp.body, &key)
                    ))),
                    429 => Verdict::Retry(BackendError::RateLimited {
                        attempts: attempt + 1,
                    }),
                    s if s >= 500 => Verdict::Retry(BackendError::ServiceError {
                        status: s,
                        body: excerpt(&resp.body, &key),
                    }),
                    s => Verdict::Fail(BackendError::ServiceError {
                        status: s,
                        body: excerpt(&resp.body, &key),
                    }),
                }
            }
            Err(TransportError::Timeout) => {
                record(attempt, None);
                Verdict::Retry(BackendError::Timeout {
                    attempts: attempt + 1,
                })
            }
            Err(TransportError::Connect(msg)) => {
                record(attempt, None);
                Verdict::Retry(BackendError::ServiceError {
                    status: 0,
                    body: excerpt(msg.as_bytes(), &key),
                })
            }
        };
        match verdict {
            Verdict::Done(v) => return Ok(v),
            Verdict::Fail(e) => return Err(e),
            Verdict::Retry(e) if attempt >= config.max_retries => return Err(e),
            Verdict::Retry(_) => {
                sleeper.sleep(config.backoff(attempt, salt));
                attempt += 1;
            }
        }
    }
}
