use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use captionret::backends::{
    fixture_captioner, CaptionerBackend, DiskCache, RemoteCaptioner, RemoteEmbedder,
    ReqwestTransport, DEFAULT_QUERY_PROMPT,
};
use captionret::corpus::{compute_stats, dedup_corpus, parse_corpus, CorpusStats};
use captionret::embedding::{EmbeddingBackend, LocalHashBackend};
use captionret::evalharness::{run_benchmark, BenchmarkConfig, Direction, GroundTruth};
use captionret::index::build_index;
use captionret::retrieval::{i2t_retrieve, t2i_retrieve};
use captionret::Index;
use serde::Serialize;
use serde_json::json;

use crate::config::{load_caption_table, BackendChoice, CaptionerChoice, RunConfig};
use crate::{CliError, DirectionArg, Mode};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn cache(cfg: &RunConfig) -> Option<DiskCache> {
    cfg.cache_dir.as_ref().map(DiskCache::new)
}

fn embedding_backend(cfg: &RunConfig) -> Result<Box<dyn EmbeddingBackend>, CliError> {
    Ok(match &cfg.backend {
        BackendChoice::Local { dim } => {
            Box::new(LocalHashBackend::new(*dim).map_err(|e| CliError::input("config", e))?)
        }
        BackendChoice::Remote(remote) => {
            let mut remote = (**remote).clone();
            remote.permits = cfg.permits;
            Box::new(RemoteEmbedder::new(
                remote,
                Arc::new(ReqwestTransport::new()),
                cache(cfg),
            )?)
        }
    })
}

fn captioner(cfg: &RunConfig) -> Result<Option<Box<dyn CaptionerBackend>>, CliError> {
    Ok(match &cfg.captioner {
        CaptionerChoice::None => None,
        CaptionerChoice::Fixture(path) => {
            Some(Box::new(fixture_captioner(load_caption_table(path)?)?))
        }
        CaptionerChoice::Remote(remote) => Some(Box::new(RemoteCaptioner::new(
            (**remote).clone(),
            Arc::new(ReqwestTransport::new()),
            cache(cfg),
        )?)),
    })
}

fn prompt(cfg: &RunConfig) -> &str {
    cfg.prompt.as_deref().unwrap_or(DEFAULT_QUERY_PROMPT)
}

#[derive(Serialize)]
struct IngestSummary<'a> {
    input: String,
    kept: usize,
    dropped: usize,
    duplicates_removed: usize,
    corpus_hash: String,
    diagnostics: &'a [captionret::corpus::Diagnostic],
}

pub fn ingest(cfg: &RunConfig, input: Option<&Path>) -> Result<(), CliError> {
    let input = match input {
        Some(p) => p,
        None => cfg.corpus_path()?,
    };
    let parsed = parse_corpus(input, cfg.strict)?;
    let (corpus, duplicates) = dedup_corpus(&parsed.corpus);
    ensure_dir(&cfg.output_dir)?;
    let out = cfg.output_dir.join("corpus.jsonl");
    corpus.write(&out)?;
    let summary = IngestSummary {
        input: input.display().to_string(),
        kept: corpus.len(),
        dropped: parsed.diagnostics.len(),
        duplicates_removed: duplicates,
        corpus_hash: corpus.content_hash(),
        diagnostics: &parsed.diagnostics,
    };
    let diag = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write(&cfg.output_dir.join("diagnostics.json"), diag)?;
    println!(
        "{} kept, {} dropped, {} duplicates removed",
        summary.kept, summary.dropped, summary.duplicates_removed
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Rows in the conventional dataset-statistics order.
pub fn stats_rows(s: &CorpusStats) -> Vec<(&'static str, String)> {
    let per_image = if s.total_images == 0 {
        0.0
    } else {
        s.total_caption_sets as f64 / s.total_images as f64
    };
    vec![
        ("Total Images", group(s.total_images)),
        ("Total Caption Sets", group(s.total_caption_sets)),
        ("Caption Sets per Image", format!("{per_image:.2}")),
        ("Vocabulary Size", group(s.vocabulary_size)),
        (
            "Avg. Relations per Image",
            format!("{:.2}", s.avg_relations_per_image),
        ),
        (
            "Avg. Entities per Image",
            format!("{:.2}", s.avg_entities_per_image),
        ),
        ("Total Caption Sentences", group(s.total_sentences)),
        (
            "Avg. Sentences per Caption",
            format!("{:.2}", s.avg_sentences_per_caption),
        ),
        (
            "Avg. Caption Length (words)",
            format!("{:.2}", s.avg_caption_length_words),
        ),
    ]
}

pub fn stats(cfg: &RunConfig, as_json: bool) -> Result<(), CliError> {
    let parsed = parse_corpus(cfg.corpus_path()?, cfg.strict)?;
    let s = compute_stats(&parsed.corpus);
    if as_json {
        println!(
            "{}",
            serde_json::to_string_pretty(&s).expect("stats serialize")
        );
        return Ok(());
    }
    let rows = stats_rows(&s);
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0) + 1;
    for (k, v) in rows {
        println!("{:<w$} {v}", format!("{k}:"));
    }
    Ok(())
}

pub fn index(cfg: &RunConfig) -> Result<(), CliError> {
    let parsed = parse_corpus(cfg.corpus_path()?, cfg.strict)?;
    let backend = embedding_backend(cfg)?;
    let idx: Index = build_index(&parsed.corpus, backend.as_ref())?;
    if let Some(parent) = cfg.index.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    idx.save(&cfg.index)?;
    let meta = json!({
        "index": cfg.index.display().to_string(),
        "images": idx.image_count(),
        "vectors": idx.entry_count(),
        "fingerprint": {
            "corpus_hash": parsed.corpus.content_hash(),
            "backend_id": idx.backend_id(),
            "dim": idx.dim(),
            "tool_version": env!("CARGO_PKG_VERSION"),
        },
    });
    let mut meta_path = cfg.index.clone().into_os_string();
    meta_path.push(".json");
    write(
        Path::new(&meta_path),
        serde_json::to_string_pretty(&meta).unwrap() + "\n",
    )?;
    println!(
        "indexed {} images ({} vectors, dim {}) -> {}",
        idx.image_count(),
        idx.entry_count(),
        idx.dim(),
        cfg.index.display()
    );
    Ok(())
}

pub fn query(
    cfg: &RunConfig,
    mode: Mode,
    text: Option<&str>,
    image: Option<&Path>,
    k: usize,
    as_json: bool,
) -> Result<(), CliError> {
    let idx = Index::load(&cfg.index)?;
    let backend = embedding_backend(cfg)?;
    let outcome = match mode {
        Mode::T2i => t2i_retrieve(&idx, backend.as_ref(), text.unwrap_or_default(), k)?,
        Mode::I2t => {
            let cap = captioner(cfg)?.ok_or_else(|| {
                CliError::input("missing_captioner", "i2t queries need a captioner")
            })?;
            let image = image.unwrap_or(Path::new(""));
            i2t_retrieve(&idx, backend.as_ref(), cap.as_ref(), image, prompt(cfg), k)?
        }
    };
    if as_json {
        println!(
            "{}",
            serde_json::to_string(&outcome).expect("outcome serializes")
        );
    } else {
        for (rank, hit) in outcome.results.hits.iter().enumerate() {
            println!(
                "{}\t{}\t{:.6}\tvariant {}",
                rank + 1,
                hit.image_id,
                hit.score,
                hit.best_variant_id
            );
        }
    }
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    direction: DirectionArg,
    ground_truth: Option<PathBuf>,
    image_root: Option<PathBuf>,
    method: &str,
) -> Result<(), CliError> {
    let idx = Index::load(&cfg.index)?;
    let gt_path = ground_truth
        .or_else(|| cfg.ground_truth.clone())
        .ok_or_else(|| CliError::input("config", "no ground-truth file given (--ground-truth)"))?;
    if !gt_path.exists() {
        return Err(CliError::missing(&gt_path, "not found"));
    }
    let gt = GroundTruth::load(&gt_path)?;
    let keep = |d: Direction| match direction {
        DirectionArg::Both => true,
        DirectionArg::T2i => d == Direction::T2i,
        DirectionArg::I2t => d == Direction::I2t,
    };
    let gt = GroundTruth::new(
        gt.queries
            .into_iter()
            .filter(|q| keep(q.direction))
            .collect(),
    )?;
    if gt.queries.is_empty() {
        return Err(CliError::input(
            "ground_truth",
            "no queries for the requested direction",
        ));
    }

    let backend = embedding_backend(cfg)?;
    let cap = if gt.has(Direction::I2t) {
        captioner(cfg)?
    } else {
        None
    };
    let corpus_hash = match &cfg.corpus {
        Some(p) if p.exists() => Some(parse_corpus(p, false)?.corpus.content_hash()),
        _ => None,
    };
    ensure_dir(&cfg.output_dir)?;
    let config = BenchmarkConfig {
        ks: cfg.ks.clone(),
        protocol: cfg.protocol,
        prompt: prompt(cfg).to_owned(),
        image_root: image_root
            .or_else(|| cfg.image_root.clone())
            .or_else(|| gt_path.parent().map(Path::to_path_buf)),
        corpus_hash,
        trace_path: Some(cfg.output_dir.join("eval_trace.jsonl")),
        permits: cfg.permits,
    };
    let report = run_benchmark(&idx, backend.as_ref(), cap.as_deref(), &gt, &config)?;
    let mut ks = cfg.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let table = report.render_table(method, &ks);
    write(&cfg.output_dir.join("eval_report.json"), report.to_json())?;
    write(&cfg.output_dir.join("eval_table.txt"), &table)?;
    print!("{table}");
    Ok(())
}
