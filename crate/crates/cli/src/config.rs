//! Run configuration: a TOML file overlaid by command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use captionret::backends::RemoteServiceConfig;
use captionret::embedding::LOCAL_DEFAULT_DIM;
use captionret::evalharness::{I2tProtocol, DEFAULT_KS};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CaptionerKind {
    None,
    Fixture,
    Remote,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<BackendKind>,
    pub dim: Option<usize>,
    pub remote: Option<RemoteServiceConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionerSection {
    pub kind: Option<CaptionerKind>,
    /// JSON object mapping image id (or path) to caption.
    pub fixture: Option<PathBuf>,
    pub prompt: Option<String>,
    pub remote: Option<RemoteServiceConfig>,
}

/// The config file as written; every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub ks: Option<Vec<usize>>,
    pub strict: Option<bool>,
    pub permits: Option<usize>,
    pub protocol: Option<I2tProtocol>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub captioner: CaptionerSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::input("config", format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::input("config", format!("{}: {e}", path.display())))?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.corpus,
            &mut cfg.index,
            &mut cfg.ground_truth,
            &mut cfg.image_root,
            &mut cfg.output_dir,
            &mut cfg.cache_dir,
            &mut cfg.captioner.fixture,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Values given on the command line; these win over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Comma-separated cutoffs, e.g. 1,5,10.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Abort on the first invalid record instead of dropping it.
    #[arg(long, global = true)]
    pub strict: bool,
    #[arg(long, global = true)]
    pub permits: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub captioner: Option<CaptionerKind>,
    /// JSON object mapping image id to caption.
    #[arg(long, global = true)]
    pub captions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone)]
pub enum BackendChoice {
    Local { dim: usize },
    Remote(Box<RemoteServiceConfig>),
}

#[derive(Debug, Clone)]
pub enum CaptionerChoice {
    None,
    Fixture(PathBuf),
    Remote(Box<RemoteServiceConfig>),
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub index: PathBuf,
    pub ground_truth: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub ks: Vec<usize>,
    pub strict: bool,
    pub permits: usize,
    pub protocol: I2tProtocol,
    pub prompt: Option<String>,
    pub backend: BackendChoice,
    pub captioner: CaptionerChoice,
}

impl RunConfig {
    pub fn resolve(flags: &Overrides) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let output_dir = flags
            .output_dir
            .clone()
            .or(file.output_dir)
            .unwrap_or_else(|| PathBuf::from("out"));
        let index = flags
            .index
            .clone()
            .or(file.index)
            .unwrap_or_else(|| output_dir.join("index.trsi"));
        let ks = flags
            .ks
            .clone()
            .or(file.ks)
            .unwrap_or_else(|| DEFAULT_KS.to_vec());
        if ks.is_empty() || ks.contains(&0) {
            return Err(CliError::input(
                "config",
                format!("ks must be positive integers, got {ks:?}"),
            ));
        }
        let permits = flags.permits.or(file.permits).unwrap_or(1);
        if permits == 0 {
            return Err(CliError::input("config", "permits must be at least 1"));
        }

        let remote_or_err = |section: Option<RemoteServiceConfig>, what: &str| {
            section.ok_or_else(|| {
                CliError::input(
                    "config",
                    format!("{what} is remote but [{what}.remote] is missing"),
                )
            })
        };
        let backend = match flags
            .backend
            .or(file.backend.kind)
            .unwrap_or(BackendKind::Local)
        {
            BackendKind::Local => BackendChoice::Local {
                dim: flags.dim.or(file.backend.dim).unwrap_or(LOCAL_DEFAULT_DIM),
            },
            BackendKind::Remote => {
                let mut remote = remote_or_err(file.backend.remote, "backend")?;
                if let Some(d) = flags.dim.or(file.backend.dim) {
                    remote.dim = Some(d);
                }
                BackendChoice::Remote(Box::new(remote))
            }
        };
        let fixture = flags.captions.clone().or(file.captioner.fixture);
        let default_kind = if fixture.is_some() {
            CaptionerKind::Fixture
        } else {
            CaptionerKind::None
        };
        let captioner = match flags
            .captioner
            .or(file.captioner.kind)
            .unwrap_or(default_kind)
        {
            CaptionerKind::None => CaptionerChoice::None,
            CaptionerKind::Fixture => CaptionerChoice::Fixture(fixture.ok_or_else(|| {
                CliError::input("config", "fixture captioner needs a captions file")
            })?),
            CaptionerKind::Remote => CaptionerChoice::Remote(Box::new(remote_or_err(
                file.captioner.remote,
                "captioner",
            )?)),
        };

        Ok(Self {
            corpus: flags.corpus.clone().or(file.corpus),
            index,
            ground_truth: file.ground_truth,
            image_root: file.image_root,
            output_dir,
            cache_dir: flags.cache_dir.clone().or(file.cache_dir),
            ks,
            strict: flags.strict || file.strict.unwrap_or(false),
            permits,
            protocol: file.protocol.unwrap_or_default(),
            prompt: flags.prompt.clone().or(file.captioner.prompt),
            backend,
            captioner,
        })
    }

    pub fn corpus_path(&self) -> Result<&Path, CliError> {
        self.corpus.as_deref().ok_or_else(|| {
            CliError::input(
                "config",
                "no corpus path given (--corpus or config `corpus`)",
            )
        })
    }
}

/// Reads a fixture caption table.
pub fn load_caption_table(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::input("captions", format!("{}: {e}", path.display())))
}
