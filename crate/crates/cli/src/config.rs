use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use needlegauge::forge::FillRange;
use needlegauge::gateway::{ChatBackend, HttpBackend, API_KEY_ENV};
use needlegauge::matching::Criterion;
use needlegauge::metrics::ScoreThresholds;
use needlegauge::prompts::PromptSet;
use needlegauge::{ExtractionConfig, GatewayConfig, LlmGateway, MockBackend};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything a run depends on. Loaded from one JSON file, then overridden
/// by command-line flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gateway: GatewayConfig,
    pub extraction: ExtractionConfig,
    /// Directory with `system.txt`, `piece.txt`, `continue.txt` overriding
    /// the built-in extraction prompts.
    pub prompts_dir: Option<PathBuf>,
    pub thresholds: ScoreThresholds,
    pub criteria: Vec<Criterion>,
    pub fill: FillRange,
    pub seed: u64,
    pub needle_types: Vec<String>,
    pub needles_per_type: usize,
    /// Label for reports; defaults to the gateway model.
    pub model_label: Option<String>,
    /// Replay recorded replies instead of calling the endpoint. A
    /// subdirectory named after the document stem takes precedence.
    pub replay_dir: Option<PathBuf>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gateway: GatewayConfig::default(),
            extraction: ExtractionConfig::default(),
            prompts_dir: None,
            thresholds: ScoreThresholds::default(),
            criteria: Criterion::standard(),
            fill: FillRange::default(),
            seed: 0,
            needle_types: Vec::new(),
            needles_per_type: 1,
            model_label: None,
            replay_dir: None,
            jobs: 1,
        }
    }
}

#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Continuation calls per piece
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Replay recorded replies from this directory
    #[arg(long, global = true)]
    pub replay: Option<PathBuf>,
    /// Documents processed in parallel
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Label written into reports
    #[arg(long, global = true)]
    pub label: Option<String>,
}

impl RunConfig {
    pub fn load(over: &Overrides) -> Result<Self> {
        let mut cfg = match &over.config {
            Some(path) => {
                let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = over.seed {
            cfg.seed = s;
        }
        if let Some(i) = over.iterations {
            cfg.extraction.iterations_per_piece = i;
        }
        if let Some(m) = &over.model {
            cfg.gateway.model = m.clone();
        }
        if let Some(e) = &over.endpoint {
            cfg.gateway.endpoint = e.clone();
        }
        if let Some(r) = &over.replay {
            cfg.replay_dir = Some(r.clone());
        }
        if let Some(j) = over.jobs {
            cfg.jobs = j;
        }
        if let Some(l) = &over.label {
            cfg.model_label = Some(l.clone());
        }
        cfg.validate()?;
        if let Some(dir) = &cfg.prompts_dir {
            cfg.extraction.prompts = PromptSet::from_dir(dir).with_context(|| format!("reading prompts from {}", dir.display()))?;
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.gateway.validate()?;
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        if self.criteria.is_empty() {
            bail!("at least one criterion is required");
        }
        for dir in [&self.prompts_dir, &self.replay_dir].into_iter().flatten() {
            if !dir.is_dir() {
                bail!("{} is not a directory", dir.display());
            }
        }
        Ok(())
    }

    /// Short hash of the effective configuration, prompts included.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        let p = &self.extraction.prompts;
        for part in [&p.system, &p.piece, &p.continuation] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())[..16].to_owned()
    }

    pub fn label(&self) -> String {
        self.model_label.clone().unwrap_or_else(|| self.gateway.model.clone())
    }

    /// Gateway for one document. Replay directories get a fresh script per
    /// document so parallel runs stay deterministic.
    pub fn gateway(&self, stem: &str) -> Result<LlmGateway> {
        let backend: Arc<dyn ChatBackend> = match &self.replay_dir {
            Some(dir) => {
                let own = dir.join(stem);
                let dir = if own.is_dir() { own } else { dir.clone() };
                Arc::new(MockBackend::from_dir(&dir)?)
            }
            None => {
                if std::env::var_os(API_KEY_ENV).is_none() {
                    log::warn!("{API_KEY_ENV} is not set; requests go out without credentials");
                }
                Arc::new(HttpBackend::from_env())
            }
        };
        Ok(LlmGateway::from_arc(backend, self.gateway.clone()))
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?)
    }
}

pub fn ensure_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{} does not exist", path.display());
    }
    Ok(())
}
