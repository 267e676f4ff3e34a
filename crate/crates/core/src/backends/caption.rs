use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use base64::Engine;
use serde_json::{json, Value};

use super::cache::{sha256_hex, CacheKey, DiskCache};
use super::transport::Transport;
use super::{send_with_retry, Attempt, BackendError, RemoteServiceConfig, Sleeper, ThreadSleeper};

/// Query-side prompt used when the configuration does not supply one.
pub const DEFAULT_QUERY_PROMPT: &str = "Describe this remote sensing image in one paragraph. \
Name the scene type, the main objects and how many there are, and where they sit relative \
to each other.";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CaptionError {
    #[error("image not found: {0}")]
    FileNotFound(String),
    #[error("captioner returned an empty caption")]
    EmptyCaption,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("no caption for image {0}")]
    UnknownImage(String),
    #[error("fixture table is empty")]
    EmptyTable,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("reading image: {0}")]
    Io(String),
}

/// Turns an image into query text.
pub trait CaptionerBackend: Send + Sync {
    fn captioner_id(&self) -> &str;

    fn caption(&self, image: &Path, prompt: &str) -> Result<String, CaptionError>;
}

/// Canned captions keyed by image id.
///
/// An image path matches a key if the key equals the full path or the file
/// stem, so `imgs/img7.png` finds `img7`.
#[derive(Debug, Clone)]
pub struct FixtureCaptioner {
    table: BTreeMap<String, String>,
}

pub fn fixture_captioner(
    table: BTreeMap<String, String>,
) -> Result<FixtureCaptioner, CaptionError> {
    if table.is_empty() {
        return Err(CaptionError::EmptyTable);
    }
    Ok(FixtureCaptioner { table })
}

impl FixtureCaptioner {
    fn lookup(&self, image: &Path) -> Option<&String> {
        let full = image.to_string_lossy();
        self.table.get(full.as_ref()).or_else(|| {
            image
                .file_stem()
                .and_then(|s| self.table.get(s.to_string_lossy().as_ref()))
        })
    }
}

impl CaptionerBackend for FixtureCaptioner {
    fn captioner_id(&self) -> &str {
        "fixture"
    }

    fn caption(&self, image: &Path, _prompt: &str) -> Result<String, CaptionError> {
        self.lookup(image).cloned().ok_or_else(|| {
            let id = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| image.display().to_string());
            CaptionError::UnknownImage(id)
        })
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("tif" | "tiff") => "image/tiff",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    }
}

/// Vision-language captioning client speaking the chat-completions format:
///
/// ```text
/// {"model": m, "temperature": t, "max_tokens": n,
///  "messages": [{"role": "user", "content": [
///     {"type": "text", "text": prompt},
///     {"type": "image_url", "image_url": {"url": "data:<mime>;base64,<bytes>"}}]}]}
/// ```
///
/// The caption is `choices[0].message.content`, trimmed.
pub struct RemoteCaptioner {
    config: RemoteServiceConfig,
    id: String,
    transport: Arc<dyn Transport>,
    sleeper: Arc<dyn Sleeper>,
    cache: Option<DiskCache>,
    requests: AtomicUsize,
    attempts: Mutex<Vec<Attempt>>,
}

impl RemoteCaptioner {
    pub fn new(
        config: RemoteServiceConfig,
        transport: Arc<dyn Transport>,
        cache: Option<DiskCache>,
    ) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self {
            id: format!("caption:{}", config.model_name),
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

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn attempts(&self) -> Vec<Attempt> {
        self.attempts.lock().unwrap().clone()
    }

    fn parse(body: &[u8]) -> Result<String, BackendError> {
        let v: Value = serde_json::from_slice(body).map_err(|e| BackendError::ServiceError {
            status: 200,
            body: format!("invalid JSON: {e}"),
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(|s| s.trim().to_owned())
            .ok_or_else(|| BackendError::ServiceError {
                status: 200,
                body: "missing choices[0].message.content".into(),
            })
    }
}

/// Captions `image_path` through `captioner` with `prompt`.
pub fn remote_caption(
    captioner: &RemoteCaptioner,
    image_path: &Path,
    prompt: &str,
) -> Result<String, CaptionError> {
    captioner.caption(image_path, prompt)
}

impl CaptionerBackend for RemoteCaptioner {
    fn captioner_id(&self) -> &str {
        &self.id
    }

    fn caption(&self, image: &Path, prompt: &str) -> Result<String, CaptionError> {
        if prompt.trim().is_empty() {
            return Err(CaptionError::EmptyPrompt);
        }
        let bytes = fs::read(image).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => CaptionError::FileNotFound(image.display().to_string()),
            _ => CaptionError::Io(e.to_string()),
        })?;
        let key = CacheKey {
            backend_id: self.id.clone(),
            model_name: self.config.model_name.clone(),
            content_hash: sha256_hex(
                format!("{}:{}", sha256_hex(&bytes), sha256_hex(prompt.as_bytes())).as_bytes(),
            ),
        };
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get::<String>(&key)) {
            return Ok(hit.payload);
        }

        let data_url = format!(
            "data:{};base64,{}",
            mime_for(image),
            base64::engine::general_purpose::STANDARD.encode(&bytes)
        );
        let body = json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": data_url}},
                ],
            }],
        });
        let body = serde_json::to_vec(&body).expect("request serializes");
        let request = self.requests.fetch_add(1, Ordering::SeqCst);
        let salt = u64::from_le_bytes(key.content_hash.as_bytes()[..8].try_into().unwrap());
        let caption = send_with_retry(
            &self.config,
            self.transport.as_ref(),
            self.sleeper.as_ref(),
            &self.config.url(&self.config.caption_path),
            &body,
            salt,
            |attempt, status| {
                self.attempts.lock().unwrap().push(Attempt {
                    request,
                    attempt,
                    status,
                })
            },
            Self::parse,
        )?;
        if caption.is_empty() {
            return Err(CaptionError::EmptyCaption);
        }
        if let Some(c) = &self.cache {
            c.put(&key, &caption)
                .map_err(|e| BackendError::Cache(e.to_string()))?;
        }
        Ok(caption)
    }
}
