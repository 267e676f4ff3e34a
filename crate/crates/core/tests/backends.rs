use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use captionret::backends::{
    remote_caption, remote_embed, BackendError, CaptionError, CaptionerBackend, DiskCache,
    HttpResponse, RemoteCaptioner, RemoteEmbedder, RemoteServiceConfig, ReqwestTransport, Sleeper,
    Transport, TransportError,
};
use captionret::embedding::{embed_batch, EmbedError, EmbeddingBackend, EmbeddingVector};
use serde_json::{json, Value};

const DIM: usize = 4;

/// Deterministic, unnormalized vector for a text.
fn fake_vector(text: &str) -> Vec<f64> {
    let b = text.as_bytes();
    vec![b.len() as f64, b[0] as f64, *b.last().unwrap() as f64, 1.0]
}

/// Embeddings service returning scripted failure statuses before succeeding.
#[derive(Default)]
struct FakeService {
    calls: AtomicUsize,
    script: Mutex<VecDeque<Result<u16, TransportError>>>,
    bodies: Mutex<Vec<Value>>,
    bearers: Mutex<Vec<String>>,
    caption: Option<String>,
}

impl FakeService {
    fn scripted(script: Vec<Result<u16, TransportError>>) -> Self {
        Self {
            script: Mutex::new(script.into()),
            ..Default::default()
        }
    }
}

impl Transport for FakeService {
    fn post_json(
        &self,
        _url: &str,
        bearer: &str,
        body: &[u8],
        _timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.bearers.lock().unwrap().push(bearer.to_owned());
        let req: Value = serde_json::from_slice(body).unwrap();
        self.bodies.lock().unwrap().push(req.clone());
        if let Some(next) = self.script.lock().unwrap().pop_front() {
            let status = next?;
            return Ok(HttpResponse {
                status,
                body: br#"{"error":"try later"}"#.to_vec(),
            });
        }
        let body = if let Some(c) = &self.caption {
            json!({"choices": [{"message": {"role": "assistant", "content": format!("  {c}\n")}}]})
        } else {
            // reversed order exercises index-based reassembly
            let data: Vec<Value> = req["input"]
                .as_array()
                .unwrap()
                .iter()
                .enumerate()
                .rev()
                .map(|(i, t)| json!({"index": i, "embedding": fake_vector(t.as_str().unwrap())}))
                .collect();
            json!({ "data": data })
        };
        Ok(HttpResponse {
            status: 200,
            body: serde_json::to_vec(&body).unwrap(),
        })
    }
}

#[derive(Default)]
struct RecordingSleeper(Mutex<Vec<Duration>>);

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.0.lock().unwrap().push(d);
    }
}

fn config(key_env: &str) -> RemoteServiceConfig {
    std::env::set_var(key_env, format!("sk-secret-{key_env}"));
    RemoteServiceConfig {
        base_url: "http://fake.local/v1".into(),
        model_name: "embed-small".into(),
        api_key_env: key_env.into(),
        dim: Some(DIM),
        ..Default::default()
    }
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("caption number {i}")).collect()
}

#[test]
fn chunks_at_max_batch_and_preserves_order() {
    let svc = Arc::new(FakeService::default());
    let emb = RemoteEmbedder::new(config("KEY_CHUNKS"), svc.clone(), None).unwrap();
    let ts = texts(300);
    let refs: Vec<&str> = ts.iter().map(String::as_str).collect();
    let out: Vec<EmbeddingVector<f64>> = remote_embed(&emb, &refs).unwrap();
    assert_eq!(svc.calls.load(Ordering::SeqCst), 3);
    assert_eq!(emb.request_count(), 3);
    let sizes: Vec<usize> = svc
        .bodies
        .lock()
        .unwrap()
        .iter()
        .map(|b| b["input"].as_array().unwrap().len())
        .collect();
    let mut sorted = sizes.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![44, 128, 128]);
    for (t, v) in ts.iter().zip(&out) {
        let want = captionret::embedding::normalize(&fake_vector(t)).unwrap();
        assert_eq!(v, &want);
    }
}

#[test]
fn warm_cache_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(FakeService::default());
    let cfg = config("KEY_CACHE");
    let cold =
        RemoteEmbedder::new(cfg.clone(), svc.clone(), Some(DiskCache::new(dir.path()))).unwrap();
    let ts = texts(10);
    let refs: Vec<&str> = ts.iter().map(String::as_str).collect();
    let first: Vec<EmbeddingVector<f64>> = remote_embed(&cold, &refs).unwrap();
    assert_eq!(svc.calls.load(Ordering::SeqCst), 1);

    let svc2 = Arc::new(FakeService::default());
    let warm = RemoteEmbedder::new(cfg, svc2.clone(), Some(DiskCache::new(dir.path()))).unwrap();
    let second: Vec<EmbeddingVector<f64>> = remote_embed(&warm, &refs).unwrap();
    assert_eq!(svc2.calls.load(Ordering::SeqCst), 0);
    assert_eq!(first, second);

    // cache files never contain the credential
    for entry in walk(dir.path()) {
        let body = std::fs::read_to_string(entry).unwrap();
        assert!(!body.contains("sk-secret"));
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn repeated_text_costs_one_call() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(FakeService::default());
    let emb = RemoteEmbedder::new(
        config("KEY_REPEAT"),
        svc.clone(),
        Some(DiskCache::new(dir.path())),
    )
    .unwrap();
    let a: Vec<EmbeddingVector<f64>> = embed_batch(&emb, &["harbor with boats"]).unwrap();
    let b: Vec<EmbeddingVector<f64>> = embed_batch(&emb, &["harbor with boats"]).unwrap();
    assert_eq!(svc.calls.load(Ordering::SeqCst), 1);
    assert_eq!(a, b);
    // duplicates inside one batch are requested once
    let c: Vec<EmbeddingVector<f64>> =
        embed_batch(&emb, &["x y", "x y", "harbor with boats"]).unwrap();
    assert_eq!(svc.calls.load(Ordering::SeqCst), 2);
    assert_eq!(svc.bodies.lock().unwrap()[1]["input"], json!(["x y"]));
    assert_eq!(c[0], c[1]);
}

#[test]
fn retries_rate_limits_then_succeeds() {
    let svc = Arc::new(FakeService::scripted(vec![Ok(429), Ok(429)]));
    let sleeper = Arc::new(RecordingSleeper::default());
    let emb = RemoteEmbedder::new(config("KEY_RETRY"), svc.clone(), None)
        .unwrap()
        .with_sleeper(sleeper.clone());
    let out: Vec<EmbeddingVector<f64>> = remote_embed(&emb, &["a road"]).unwrap();
    assert_eq!(out.len(), 1);
    let attempts = emb.attempts();
    assert_eq!(attempts.len(), 3);
    assert_eq!(
        attempts.iter().map(|a| a.status).collect::<Vec<_>>(),
        vec![Some(429), Some(429), Some(200)]
    );
    let waits = sleeper.0.lock().unwrap().clone();
    assert_eq!(waits.len(), 2);
    assert!(waits[0] >= Duration::from_millis(500) && waits[0] < Duration::from_millis(625));
    assert!(waits[1] >= Duration::from_millis(1000) && waits[1] < Duration::from_millis(1250));
}

#[test]
fn exhausted_retries_surface_typed_errors() {
    let sleeper: Arc<dyn Sleeper> = Arc::new(RecordingSleeper::default());
    let svc = Arc::new(FakeService::scripted(vec![Ok(429); 4]));
    let emb = RemoteEmbedder::new(config("KEY_RL"), svc.clone(), None)
        .unwrap()
        .with_sleeper(sleeper.clone());
    assert_eq!(
        remote_embed::<f64>(&emb, &["a"]).unwrap_err(),
        BackendError::RateLimited { attempts: 4 }
    );
    assert_eq!(svc.calls.load(Ordering::SeqCst), 4);

    let svc = Arc::new(FakeService::scripted(vec![Err(TransportError::Timeout); 4]));
    let emb = RemoteEmbedder::new(config("KEY_TO"), svc, None)
        .unwrap()
        .with_sleeper(sleeper.clone());
    assert_eq!(
        remote_embed::<f64>(&emb, &["a"]).unwrap_err(),
        BackendError::Timeout { attempts: 4 }
    );

    let svc = Arc::new(FakeService::scripted(vec![Ok(401)]));
    let emb = RemoteEmbedder::new(config("KEY_AUTH"), svc.clone(), None)
        .unwrap()
        .with_sleeper(sleeper.clone());
    assert!(matches!(
        remote_embed::<f64>(&emb, &["a"]),
        Err(BackendError::AuthError(_))
    ));
    assert_eq!(svc.calls.load(Ordering::SeqCst), 1);

    let svc = Arc::new(FakeService::scripted(vec![Ok(400)]));
    let emb = RemoteEmbedder::new(config("KEY_400"), svc, None)
        .unwrap()
        .with_sleeper(sleeper);
    let err = remote_embed::<f64>(&emb, &["a"]).unwrap_err();
    assert!(matches!(
        err,
        BackendError::ServiceError { status: 400, .. }
    ));
    assert!(!err.to_string().contains("sk-secret"));
}

#[test]
fn missing_credential_is_an_auth_error() {
    let mut cfg = config("KEY_UNUSED");
    cfg.api_key_env = "CAPTIONRET_TEST_NO_SUCH_VAR".into();
    let svc = Arc::new(FakeService::default());
    let emb = RemoteEmbedder::new(cfg, svc.clone(), None).unwrap();
    let err = remote_embed::<f64>(&emb, &["a"]).unwrap_err();
    assert!(
        matches!(err, BackendError::AuthError(ref m) if m.contains("CAPTIONRET_TEST_NO_SUCH_VAR"))
    );
    assert_eq!(svc.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn batch_failure_reports_first_failing_text() {
    let mut cfg = config("KEY_IDX");
    cfg.max_batch = 2;
    cfg.permits = 1;
    // first chunk succeeds, second is rejected
    let svc = Arc::new(FakeService::default());
    struct FailSecond(Arc<FakeService>);
    impl Transport for FailSecond {
        fn post_json(
            &self,
            u: &str,
            b: &str,
            body: &[u8],
            t: Duration,
        ) -> Result<HttpResponse, TransportError> {
            if self.0.calls.load(Ordering::SeqCst) == 1 {
                self.0.calls.fetch_add(1, Ordering::SeqCst);
                return Ok(HttpResponse {
                    status: 422,
                    body: b"bad input".to_vec(),
                });
            }
            self.0.post_json(u, b, body, t)
        }
    }
    let emb = RemoteEmbedder::new(cfg, Arc::new(FailSecond(svc)), None).unwrap();
    let err = embed_batch::<f64>(&emb, &["a", "b", "c", "d", "e"]).unwrap_err();
    assert!(
        matches!(err, EmbedError::BackendFailure { index: 2, .. }),
        "{err:?}"
    );
}

#[test]
fn captioner_caches_and_trims() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("scene.png");
    std::fs::write(&img, [0x89, b'P', b'N', b'G']).unwrap();
    let svc = Arc::new(FakeService {
        caption: Some("runway with two planes".into()),
        ..Default::default()
    });
    let mut cfg = config("KEY_CAP");
    cfg.model_name = "vlm".into();
    let cap = RemoteCaptioner::new(
        cfg,
        svc.clone(),
        Some(DiskCache::new(dir.path().join("cache"))),
    )
    .unwrap();
    let a = remote_caption(&cap, &img, "describe the scene").unwrap();
    let b = cap.caption(&img, "describe the scene").unwrap();
    assert_eq!(a, "runway with two planes");
    assert_eq!(a, b);
    assert_eq!(svc.calls.load(Ordering::SeqCst), 1);
    let req = svc.bodies.lock().unwrap()[0].clone();
    assert_eq!(req["temperature"], json!(0.0));
    assert_eq!(
        req["messages"][0]["content"][0]["text"],
        "describe the scene"
    );
    assert!(req["messages"][0]["content"][1]["image_url"]["url"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));

    // a different prompt is a different cache key
    cap.caption(&img, "list the objects").unwrap();
    assert_eq!(svc.calls.load(Ordering::SeqCst), 2);

    assert!(matches!(
        cap.caption(&dir.path().join("missing.png"), "describe"),
        Err(CaptionError::FileNotFound(_))
    ));
    assert_eq!(cap.caption(&img, " "), Err(CaptionError::EmptyPrompt));
}

#[test]
fn empty_caption_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.jpg");
    std::fs::write(&img, b"jpeg").unwrap();
    let svc = Arc::new(FakeService {
        caption: Some("   ".into()),
        ..Default::default()
    });
    let cap = RemoteCaptioner::new(config("KEY_EMPTYCAP"), svc, None).unwrap();
    assert_eq!(
        cap.caption(&img, "describe"),
        Err(CaptionError::EmptyCaption)
    );
}

/// Serves the embeddings wire format over real HTTP on a loopback port.
fn serve_embeddings(expected_bearer: String, hits: Arc<AtomicUsize>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            hits.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = String::new();
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = l["authorization:".len()..].trim().to_owned();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let (status, payload) = if auth != format!("Bearer {expected_bearer}") {
                ("401 Unauthorized", json!({"error": "bad key"}))
            } else if !request_line.starts_with("POST /v1/embeddings") {
                ("404 Not Found", json!({"error": "no route"}))
            } else {
                let req: Value = serde_json::from_slice(&body).unwrap();
                let data: Vec<Value> = req["input"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .enumerate()
                    .map(
                        |(i, t)| json!({"index": i, "embedding": fake_vector(t.as_str().unwrap())}),
                    )
                    .collect();
                (
                    "200 OK",
                    json!({"object": "list", "data": data, "model": req["model"]}),
                )
            };
            let payload = payload.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    format!("http://{addr}/v1")
}

#[test]
fn real_http_roundtrip() {
    let mut cfg = config("KEY_HTTP");
    let hits = Arc::new(AtomicUsize::new(0));
    cfg.base_url = serve_embeddings("sk-secret-KEY_HTTP".into(), hits.clone());
    cfg.max_batch = 2;
    let emb = RemoteEmbedder::new(cfg.clone(), Arc::new(ReqwestTransport::new()), None).unwrap();
    assert_eq!(emb.descriptor().backend_id, "remote:embed-small");
    let out: Vec<EmbeddingVector<f64>> =
        remote_embed(&emb, &["harbor", "forest", "runway with planes"]).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(
        out[2],
        captionret::embedding::normalize(&fake_vector("runway with planes")).unwrap()
    );
    assert_eq!(hits.load(Ordering::SeqCst), 2);

    std::env::set_var("KEY_HTTP_WRONG", "sk-wrong");
    cfg.api_key_env = "KEY_HTTP_WRONG".into();
    let bad = RemoteEmbedder::new(cfg, Arc::new(ReqwestTransport::new()), None).unwrap();
    let err = remote_embed::<f64>(&bad, &["harbor"]).unwrap_err();
    assert!(matches!(err, BackendError::AuthError(_)));
    assert!(!err.to_string().contains("sk-wrong"));
}
