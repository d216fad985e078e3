use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use needlegauge::forge::{InfusedDocument, Needle};
use needlegauge::ExtractionRun;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Provenance block embedded in every JSON artifact. No timestamps, so
/// equal inputs give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub fingerprint: Option<String>,
    pub model: String,
}

impl Meta {
    pub fn new(cfg: &RunConfig, fingerprint: Option<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            fingerprint,
            model: cfg.label(),
        }
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8 text", path.display()))
}

/// File name without directories and without the known artifact suffixes.
pub fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for suffix in [".infused.json", ".run.json", ".evaluation.json"] {
        if let Some(s) = name.strip_suffix(suffix) {
            return s.to_owned();
        }
    }
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(name)
}

/// Stems of all inputs; two inputs may not share one.
pub fn stems(paths: &[PathBuf]) -> Result<Vec<String>> {
    let out: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    let mut seen = std::collections::HashSet::new();
    for (s, p) in out.iter().zip(paths) {
        if !seen.insert(s) {
            bail!("{} would overwrite the outputs of another input named {s}", p.display());
        }
    }
    Ok(out)
}

/// Per-document seed: the run seed mixed with the document stem.
pub fn document_seed(seed: u64, stem: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stem.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Infused document plus the needles placed in it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfusionManifest {
    pub meta: Meta,
    pub source: String,
    #[serde(flatten)]
    pub document: InfusedDocument,
    pub needles: Vec<Needle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArtifact {
    pub meta: Meta,
    pub source: String,
    /// SHA-256 of the extracted text.
    pub text_ref: String,
    pub calls: usize,
    #[serde(flatten)]
    pub run: ExtractionRun,
}

impl InfusionManifest {
    /// Reads a manifest and checks that its recorded fingerprint matches the
    /// infusion it carries.
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        let actual = m.document.fingerprint();
        if m.meta.fingerprint.as_deref() != Some(actual.as_str()) {
            bail!("{}: recorded fingerprint does not match the infusion ({actual})", path.display());
        }
        Ok(m)
    }
}
