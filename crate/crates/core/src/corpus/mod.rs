//! Caption corpora: data model, line-delimited JSON ingestion, validation,
//! content de-duplication and summary statistics.

mod stats;
pub mod text;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::VARIANTS_PER_IMAGE;

pub use stats::{compute_stats, CorpusStats, LEXICON_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus file not found: {0}")]
    FileNotFound(String),
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate image id: {0}")]
    DuplicateImageId(String),
    #[error("invalid corpus: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SourceDataset {
    Rsitmd,
    Rsicd,
    Other(String),
}

impl SourceDataset {
    pub fn parse(name: &str) -> Self {
        match name.to_ascii_uppercase().as_str() {
            "RSITMD" => Self::Rsitmd,
            "RSICD" => Self::Rsicd,
            _ => Self::Other(name.to_owned()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Self::Rsitmd => "RSITMD",
            Self::Rsicd => "RSICD",
            Self::Other(name) => name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            "test" => Some(Self::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Summary,
    FeatureList,
    Detailed,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub source_dataset: SourceDataset,
    pub split: Split,
    pub image_path: Option<String>,
    pub meta: Option<Map<String, Value>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionVariant {
    pub variant_id: u8,
    pub kind: VariantKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSet {
    pub image_id: String,
    pub variants: Vec<CaptionVariant>,
}

/// One rule broken by a caption set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    WrongVariantCount { found: usize },
    VariantIdOutOfRange { variant: u8 },
    EmptyText { variant: u8 },
    DuplicateVariantId { variant: u8 },
    MissingVariantId { variant: u8 },
    EmptyImageId,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WrongVariantCount { found } => {
                write!(f, "variants: expected {VARIANTS_PER_IMAGE}, found {found}")
            }
            Self::VariantIdOutOfRange { variant } => {
                write!(f, "variant_id {variant} outside 1..={VARIANTS_PER_IMAGE}")
            }
            Self::EmptyText { variant } => write!(f, "variant {variant}: text is empty"),
            Self::DuplicateVariantId { variant } => write!(f, "variant_id {variant} repeated"),
            Self::MissingVariantId { variant } => write!(f, "variant_id {variant} missing"),
            Self::EmptyImageId => write!(f, "image_id is empty"),
        }
    }
}

/// Checks every caption-set rule and reports each violation found.
///
/// Ordering of the returned list: count, empty id, per-variant checks in list
/// order, then duplicated ids and missing ids in ascending order.
pub fn validate_caption_set(set: &CaptionSet) -> Vec<Violation> {
    let mut out = Vec::new();
    if set.variants.len() != VARIANTS_PER_IMAGE {
        out.push(Violation::WrongVariantCount {
            found: set.variants.len(),
        });
    }
    if set.image_id.trim().is_empty() {
        out.push(Violation::EmptyImageId);
    }
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for v in &set.variants {
        if v.variant_id == 0 || usize::from(v.variant_id) > VARIANTS_PER_IMAGE {
            out.push(Violation::VariantIdOutOfRange {
                variant: v.variant_id,
            });
        }
        if v.text.trim().is_empty() {
            out.push(Violation::EmptyText {
                variant: v.variant_id,
            });
        }
        if !seen.insert(v.variant_id) {
            dups.insert(v.variant_id);
        }
    }
    out.extend(
        dups.into_iter()
            .map(|variant| Violation::DuplicateVariantId { variant }),
    );
    for id in 1..=VARIANTS_PER_IMAGE as u8 {
        if !seen.contains(&id) {
            out.push(Violation::MissingVariantId { variant: id });
        }
    }
    out
}

/// True if `path` is relative and never climbs above its root.
pub fn is_safe_relative_path(path: &str) -> bool {
    let p = Path::new(path);
    !path.is_empty()
        && p.components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub record: ImageRecord,
    pub captions: CaptionSet,
}

impl CorpusEntry {
    pub fn image_id(&self) -> &str {
        &self.record.image_id
    }

    /// Variant texts ordered by variant id.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.captions.variants.iter().map(|v| v.text.as_str())
    }
}

/// Validated, immutable collection of images and their caption sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    metadata: BTreeMap<String, Value>,
}

impl Corpus {
    /// Assembles a corpus, enforcing every record and caption-set invariant.
    /// Variants are reordered by variant id.
    pub fn new(
        mut entries: Vec<CorpusEntry>,
        metadata: BTreeMap<String, Value>,
    ) -> Result<Self, CorpusError> {
        let mut ids = HashSet::with_capacity(entries.len());
        for e in &mut entries {
            check_record(&e.record).map_err(CorpusError::Invalid)?;
            if e.captions.image_id != e.record.image_id {
                return Err(CorpusError::Invalid(format!(
                    "caption set for {:?} paired with record {:?}",
                    e.captions.image_id, e.record.image_id
                )));
            }
            let violations = validate_caption_set(&e.captions);
            if !violations.is_empty() {
                return Err(CorpusError::Invalid(format!(
                    "{}: {}",
                    e.record.image_id,
                    join_violations(&violations)
                )));
            }
            if !ids.insert(e.record.image_id.clone()) {
                return Err(CorpusError::DuplicateImageId(e.record.image_id.clone()));
            }
            e.captions.variants.sort_by_key(|v| v.variant_id);
        }
        Ok(Self { entries, metadata })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn metadata(&self) -> &BTreeMap<String, Value> {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.record.image_id == image_id)
    }

    /// Serializes to the line-delimited file format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if !self.metadata.is_empty() {
            let header = serde_json::json!({ HEADER_KEY: self.metadata });
            out.push_str(&header.to_string());
            out.push('\n');
        }
        for e in &self.entries {
            let raw = RawRecord::from(e);
            out.push_str(&serde_json::to_string(&raw).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// SHA-256 of the serialized corpus, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

fn check_record(r: &ImageRecord) -> Result<(), String> {
    if r.image_id.trim().is_empty() {
        return Err("image_id is empty".into());
    }
    if let Some(p) = &r.image_path {
        if !is_safe_relative_path(p) {
            return Err(format!("image_path {p:?} is not a safe relative path"));
        }
    }
    Ok(())
}

/// A record that lenient parsing dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub kind: DiagnosticKind,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    Malformed,
    DuplicateImageId,
}

#[derive(Debug, Clone)]
pub struct ParsedCorpus {
    pub corpus: Corpus,
    pub diagnostics: Vec<Diagnostic>,
}

const HEADER_KEY: &str = "corpus_meta";

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    image_id: String,
    dataset: String,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    captions: Vec<CaptionVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<Map<String, Value>>,
}

impl From<&CorpusEntry> for RawRecord {
    fn from(e: &CorpusEntry) -> Self {
        Self {
            image_id: e.record.image_id.clone(),
            dataset: e.record.source_dataset.as_str().to_owned(),
            split: e.record.split.as_str().to_owned(),
            image_path: e.record.image_path.clone(),
            captions: e.captions.variants.clone(),
            meta: e.record.meta.clone(),
        }
    }
}

impl RawRecord {
    fn into_entry(self) -> Result<CorpusEntry, String> {
        let split =
            Split::parse(&self.split).ok_or_else(|| format!("unknown split {:?}", self.split))?;
        let record = ImageRecord {
            source_dataset: SourceDataset::parse(&self.dataset),
            split,
            image_path: self.image_path,
            meta: self.meta,
            image_id: self.image_id,
        };
        check_record(&record)?;
        let captions = CaptionSet {
            image_id: record.image_id.clone(),
            variants: self.captions,
        };
        let violations = validate_caption_set(&captions);
        if !violations.is_empty() {
            return Err(join_violations(&violations));
        }
        Ok(CorpusEntry { record, captions })
    }
}

/// Parses a corpus from line-delimited JSON text.
///
/// Strict mode aborts on the first malformed or duplicate record. Lenient mode
/// drops such records and reports each in the diagnostics.
pub fn parse_corpus_str(input: &str, strict: bool) -> Result<ParsedCorpus, CorpusError> {
    let mut entries = Vec::new();
    let mut metadata = BTreeMap::new();
    let mut diagnostics = Vec::new();
    let mut ids = HashSet::new();

    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(line);
        let entry = match parsed {
            Ok(Line::Header(meta)) => {
                metadata.extend(meta);
                continue;
            }
            Ok(Line::Record(entry)) => entry,
            Err(reason) => {
                if strict {
                    return Err(CorpusError::MalformedRecord {
                        line: line_no,
                        reason,
                    });
                }
                diagnostics.push(Diagnostic {
                    line: line_no,
                    kind: DiagnosticKind::Malformed,
                    reason,
                });
                continue;
            }
        };
        if !ids.insert(entry.record.image_id.clone()) {
            if strict {
                return Err(CorpusError::DuplicateImageId(entry.record.image_id));
            }
            diagnostics.push(Diagnostic {
                line: line_no,
                kind: DiagnosticKind::DuplicateImageId,
                reason: format!("image_id {:?} already seen", entry.record.image_id),
            });
            continue;
        }
        entries.push(entry);
    }

    let corpus = Corpus::new(entries, metadata)?;
    Ok(ParsedCorpus {
        corpus,
        diagnostics,
    })
}

enum Line {
    Header(Map<String, Value>),
    Record(CorpusEntry),
}

fn parse_line(line: &str) -> Result<Line, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    if let Value::Object(obj) = &value {
        if obj.len() == 1 {
            if let Some(Value::Object(meta)) = obj.get(HEADER_KEY) {
                return Ok(Line::Header(meta.clone()));
            }
        }
    }
    let raw: RawRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
    raw.into_entry().map(Line::Record)
}

/// Reads and parses a corpus file.
pub fn parse_corpus(path: impl AsRef<Path>, strict: bool) -> Result<ParsedCorpus, CorpusError> {
    let path = path.as_ref();
    let input = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CorpusError::FileNotFound(path.display().to_string()),
        _ => CorpusError::Io(e),
    })?;
    parse_corpus_str(&input, strict)
}

/// SHA-256 over the whitespace-normalized variant texts, in variant order,
/// separated by a unit-separator byte.
pub fn content_fingerprint(set: &CaptionSet) -> [u8; 32] {
    let mut variants: Vec<&CaptionVariant> = set.variants.iter().collect();
    variants.sort_by_key(|v| v.variant_id);
    let mut hasher = Sha256::new();
    for (i, v) in variants.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(text::normalize_whitespace(&v.text).as_bytes());
    }
    hasher.finalize().into()
}

/// Keeps the first record of every group sharing a content fingerprint.
/// Survivors keep their input order.
pub fn dedup_corpus(corpus: &Corpus) -> (Corpus, usize) {
    let mut seen = HashSet::new();
    let survivors: Vec<CorpusEntry> = corpus
        .entries
        .iter()
        .filter(|e| seen.insert(content_fingerprint(&e.captions)))
        .cloned()
        .collect();
    let removed = corpus.entries.len() - survivors.len();
    let out = Corpus {
        entries: survivors,
        metadata: corpus.metadata.clone(),
    };
    (out, removed)
}
