//! Recall@k benchmark runner for both retrieval directions.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{sha256_hex, CaptionError, CaptionerBackend, DEFAULT_QUERY_PROMPT};
use crate::embedding::{embed_text, EmbeddingBackend};
use crate::index::{RankedResult, VectorIndex};
use crate::retrieval::{check_backend, i2t_retrieve, t2i_retrieve, RetrievalError};
use crate::Scalar;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ground truth has image queries but no captioner was given")]
    MissingCaptioner,
    #[error("inconsistent ground truth for query {query_id}: {reason}")]
    InconsistentGroundTruth { query_id: String, reason: String },
    #[error("line {line}: malformed ground-truth record: {reason}")]
    MalformedGroundTruth { line: usize, reason: String },
    #[error("invalid ks: {0}")]
    InvalidKs(String),
    #[error("query {query_id}: {source}")]
    Query {
        query_id: String,
        #[source]
        source: RetrievalError,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    T2i,
    I2t,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::T2i => "t2i",
            Self::I2t => "i2t",
        }
    }
}

/// Hit rule for image queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum I2tProtocol {
    /// Images are ranked by max-over-variants score; a hit is the query
    /// image's own record within the top k images.
    #[default]
    ImageLevel,
    /// Individual captions are ranked; a hit is any caption of the query
    /// image within the top k captions.
    CaptionLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthQuery {
    pub query_id: String,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub target_image_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub queries: Vec<GroundTruthQuery>,
}

impl GroundTruth {
    pub fn new(queries: Vec<GroundTruthQuery>) -> Result<Self, EvalError> {
        let mut ids = HashSet::new();
        for q in &queries {
            let bad = |reason: &str| EvalError::InconsistentGroundTruth {
                query_id: q.query_id.clone(),
                reason: reason.to_owned(),
            };
            if !ids.insert(q.query_id.as_str()) {
                return Err(bad("duplicate query_id"));
            }
            match q.direction {
                Direction::T2i if q.text.as_deref().is_none_or(|t| t.trim().is_empty()) => {
                    return Err(bad("text query without text"))
                }
                Direction::I2t if q.image_path.as_deref().is_none_or(str::is_empty) => {
                    return Err(bad("image query without image_path"))
                }
                _ => {}
            }
        }
        Ok(Self { queries })
    }

    pub fn from_jsonl(input: &str) -> Result<Self, EvalError> {
        let queries = input
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| EvalError::MalformedGroundTruth {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(queries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        self.queries
            .iter()
            .map(|q| serde_json::to_string(q).expect("query serializes") + "\n")
            .collect()
    }

    pub fn has(&self, direction: Direction) -> bool {
        self.queries.iter().any(|q| q.direction == direction)
    }
}

/// 1 if `target` is among the first `min(k, len)` results, else 0.
pub fn recall_at_k<T>(results: &RankedResult<T>, target: &str, k: usize) -> u8 {
    u8::from(results.ids().take(k).any(|id| id == target))
}

/// Rounds to two decimals, halves away from zero.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Mean of the six Recall@k values (I2T and T2I at k = 1, 5, 10).
pub fn mean_recall(six: [f64; 6]) -> f64 {
    round2(six.iter().sum::<f64>() / 6.0)
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub ks: Vec<usize>,
    pub protocol: I2tProtocol,
    /// Captioner prompt for image queries.
    pub prompt: String,
    /// Relative image paths in the ground truth resolve against this.
    pub image_root: Option<PathBuf>,
    pub corpus_hash: Option<String>,
    /// Where to write the per-query trace, one JSON record per line.
    pub trace_path: Option<PathBuf>,
    /// Worker threads for query evaluation.
    pub permits: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            protocol: I2tProtocol::default(),
            prompt: DEFAULT_QUERY_PROMPT.to_owned(),
            image_root: None,
            corpus_hash: None,
            trace_path: None,
            permits: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fingerprint {
    pub corpus_hash: Option<String>,
    pub backend_id: String,
    pub dim: usize,
    pub prompt_hash: String,
    pub protocol: I2tProtocol,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionRecall {
    pub direction: Direction,
    pub queries: usize,
    /// k -> recall in percent, two decimals.
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub directions: Vec<DirectionRecall>,
    /// Mean of every reported recall value, two decimals.
    pub mean_recall: f64,
    pub query_count: usize,
    pub fingerprint: Fingerprint,
}

impl EvalReport {
    pub fn direction(&self, d: Direction) -> Option<&DirectionRecall> {
        self.directions.iter().find(|r| r.direction == d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Plain-text table in the usual layout: I2T recalls, T2I recalls, mR.
    pub fn render_table(&self, method: &str, ks: &[usize]) -> String {
        let mut header = vec!["Method".to_owned()];
        let mut row = vec![method.to_owned()];
        for d in [Direction::I2t, Direction::T2i] {
            let label = match d {
                Direction::I2t => "image_to_text",
                Direction::T2i => "text_to_image",
            };
            for &k in ks {
                header.push(format!("{label} recall@{k}"));
                row.push(
                    self.direction(d)
                        .and_then(|r| r.recall.get(&k))
                        .map_or_else(|| "-".to_owned(), |v| format!("{v:.2}")),
                );
            }
        }
        header.push("mR".into());
        row.push(format!("{:.2}", self.mean_recall));
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.len().max(r.len()))
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{c:<w$}");
                } else {
                    let _ = write!(s, " | {c:>w$}");
                }
            }
            s.trim_end().to_owned() + "\n"
        };
        let rule = widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-+-")
            + "\n";
        line(&header) + &rule + &line(&row)
    }
}

#[derive(Debug, Clone, Serialize)]
struct TraceRecord<'a> {
    query_id: &'a str,
    direction: Direction,
    query_text: String,
    target_image_id: &'a str,
    /// 1-based rank of the target among returned results.
    rank: Option<usize>,
    hits: BTreeMap<usize, bool>,
    top: Vec<String>,
}

struct QueryEval {
    query_text: String,
    rank: Option<usize>,
    top: Vec<String>,
}

fn validate_ks(ks: &[usize]) -> Result<Vec<usize>, EvalError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::InvalidKs(format!("{ks:?}")));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

fn evaluate_query<T: Scalar>(
    index: &VectorIndex<T>,
    backend: &dyn EmbeddingBackend,
    captioner: Option<&dyn CaptionerBackend>,
    q: &GroundTruthQuery,
    config: &BenchmarkConfig,
    k_max: usize,
) -> Result<QueryEval, RetrievalError> {
    match q.direction {
        Direction::T2i => {
            let text = q.text.as_deref().unwrap_or_default();
            let out = t2i_retrieve(index, backend, text, k_max)?;
            Ok(QueryEval {
                query_text: text.to_owned(),
                rank: out.results.rank_of(&q.target_image_id),
                top: out.results.ids().map(str::to_owned).collect(),
            })
        }
        Direction::I2t => {
            let captioner = captioner.expect("checked before evaluation");
            let rel = Path::new(q.image_path.as_deref().unwrap_or_default());
            let path = match &config.image_root {
                Some(root) if rel.is_relative() => root.join(rel),
                _ => rel.to_path_buf(),
            };
            match config.protocol {
                I2tProtocol::ImageLevel => {
                    let out =
                        i2t_retrieve(index, backend, captioner, &path, &config.prompt, k_max)?;
                    Ok(QueryEval {
                        query_text: out.generated_query_text.unwrap_or_default(),
                        rank: out.results.rank_of(&q.target_image_id),
                        top: out.results.ids().map(str::to_owned).collect(),
                    })
                }
                I2tProtocol::CaptionLevel => {
                    if !path.exists() {
                        return Err(RetrievalError::FileNotFound(path.display().to_string()));
                    }
                    check_backend(index, backend)?;
                    let caption = captioner.caption(&path, &config.prompt)?;
                    if caption.trim().is_empty() {
                        return Err(CaptionError::EmptyCaption.into());
                    }
                    let v = embed_text::<T>(backend, &caption)?;
                    let hits = index.search_entries(&v, k_max)?;
                    Ok(QueryEval {
                        query_text: caption,
                        rank: hits
                            .iter()
                            .position(|h| h.image_id == q.target_image_id)
                            .map(|p| p + 1),
                        top: hits
                            .iter()
                            .map(|h| format!("{}#{}", h.image_id, h.variant_id))
                            .collect(),
                    })
                }
            }
        }
    }
}

/// Runs every ground-truth query and aggregates Recall@k per direction.
pub fn run_benchmark<T: Scalar>(
    index: &VectorIndex<T>,
    backend: &dyn EmbeddingBackend,
    captioner: Option<&dyn CaptionerBackend>,
    gt: &GroundTruth,
    config: &BenchmarkConfig,
) -> Result<EvalReport, EvalError> {
    let ks = validate_ks(&config.ks)?;
    let k_max = *ks.last().expect("ks is non-empty");
    if gt.has(Direction::I2t) && captioner.is_none() {
        return Err(EvalError::MissingCaptioner);
    }
    for q in &gt.queries {
        if !index.contains(&q.target_image_id) {
            return Err(EvalError::InconsistentGroundTruth {
                query_id: q.query_id.clone(),
                reason: format!("target {:?} is not in the index", q.target_image_id),
            });
        }
    }

    let run = |q: &GroundTruthQuery| {
        evaluate_query(index, backend, captioner, q, config, k_max).map_err(|source| {
            EvalError::Query {
                query_id: q.query_id.clone(),
                source,
            }
        })
    };
    let evals: Vec<QueryEval> = if config.permits > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.permits)
            .build()
            .map_err(io::Error::other)?;
        pool.install(|| gt.queries.par_iter().map(run).collect::<Result<_, _>>())?
    } else {
        gt.queries.iter().map(run).collect::<Result<_, _>>()?
    };

    let mut directions = Vec::new();
    for d in [Direction::I2t, Direction::T2i] {
        let ranks: Vec<Option<usize>> = gt
            .queries
            .iter()
            .zip(&evals)
            .filter(|(q, _)| q.direction == d)
            .map(|(_, e)| e.rank)
            .collect();
        if ranks.is_empty() {
            continue;
        }
        let recall = ks
            .iter()
            .map(|&k| {
                let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
                (k, round2(100.0 * hits as f64 / ranks.len() as f64))
            })
            .collect();
        directions.push(DirectionRecall {
            direction: d,
            queries: ranks.len(),
            recall,
        });
    }
    let all: Vec<f64> = directions
        .iter()
        .flat_map(|r| r.recall.values().copied())
        .collect();
    let mean = if all.is_empty() {
        0.0
    } else {
        round2(all.iter().sum::<f64>() / all.len() as f64)
    };

    if let Some(path) = &config.trace_path {
        let mut out = io::BufWriter::new(fs::File::create(path)?);
        for (q, e) in gt.queries.iter().zip(&evals) {
            let rec = TraceRecord {
                query_id: &q.query_id,
                direction: q.direction,
                query_text: e.query_text.clone(),
                target_image_id: &q.target_image_id,
                rank: e.rank,
                hits: ks
                    .iter()
                    .map(|&k| (k, e.rank.is_some_and(|r| r <= k)))
                    .collect(),
                top: e.top.clone(),
            };
            serde_json::to_writer(&mut out, &rec).map_err(io::Error::other)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }

    let desc = backend.descriptor();
    Ok(EvalReport {
        directions,
        mean_recall: mean,
        query_count: gt.queries.len(),
        fingerprint: Fingerprint {
            corpus_hash: config.corpus_hash.clone(),
            backend_id: desc.backend_id.clone(),
            dim: desc.dim,
            prompt_hash: sha256_hex(config.prompt.as_bytes()),
            protocol: config.protocol,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        },
    })
}
