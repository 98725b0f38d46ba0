//! TOML run configuration. Relative paths resolve against the config file's
//! directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DatasetFormat, Granularity, HttpWikiConfig, KbParams, Split, SplitRatios};
use crate::embed::EmbedderConfig;
use crate::error::{Error, Result};
use crate::generator::{enumerate_configurations, BackendConfig, Configuration, Mode};
use crate::metrics::{MetricKind, RougeVariant};

fn default_seed() -> u64 {
    13
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_eval_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<DatasetFormat>,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    /// Split whose terms are generated and evaluated.
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
    /// Keep only the first N terms of the evaluation split.
    #[serde(default)]
    pub max_terms: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WikiSource {
    Recorded { bundle: PathBuf },
    Http(HttpWikiConfig),
}

fn default_chunk_tokens() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbSection {
    pub source: WikiSource,
    #[serde(default = "KbSection::default_top_n")]
    pub top_n: usize,
    #[serde(default = "KbSection::default_line_limit")]
    pub line_limit: usize,
    #[serde(default = "KbSection::default_language")]
    pub language: String,
    #[serde(default = "KbSection::default_search_limit")]
    pub search_limit: usize,
    #[serde(default = "KbSection::default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default = "default_chunk_tokens")]
    pub chunk_tokens: usize,
}

impl KbSection {
    fn default_top_n() -> usize {
        KbParams::default().top_n
    }
    fn default_line_limit() -> usize {
        KbParams::default().line_limit
    }
    fn default_language() -> String {
        KbParams::default().language
    }
    fn default_search_limit() -> usize {
        KbParams::default().search_limit
    }
    fn default_workers() -> usize {
        KbParams::default().workers
    }

    pub fn params(&self) -> KbParams {
        KbParams {
            top_n: self.top_n,
            line_limit: self.line_limit,
            language: self.language.clone(),
            search_limit: self.search_limit,
            workers: self.workers,
        }
    }
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::BaseSlm, Mode::Rag]
}

fn default_budgets() -> Vec<u32> {
    vec![25, 50]
}

fn default_k() -> usize {
    3
}

fn default_char_budget() -> Option<usize> {
    Some(4000)
}

fn default_gen_workers() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<u32>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_char_budget")]
    pub char_budget: Option<usize>,
    #[serde(default = "default_gen_workers")]
    pub workers: usize,
    #[serde(default)]
    pub base_template: Option<PathBuf>,
    #[serde(default)]
    pub rag_template: Option<PathBuf>,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            modes: default_modes(),
            budgets: default_budgets(),
            k: default_k(),
            char_budget: default_char_budget(),
            workers: default_gen_workers(),
            base_template: None,
            rag_template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalScorerConfig {
    pub url: String,
    #[serde(default = "ExternalScorerConfig::default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "ExternalScorerConfig::default_retries")]
    pub retries: u32,
}

impl ExternalScorerConfig {
    fn default_timeout_ms() -> u64 {
        60_000
    }
    fn default_retries() -> u32 {
        2
    }
}

fn default_metrics() -> Vec<MetricKind> {
    MetricKind::LEXICAL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricKind>,
    #[serde(default)]
    pub rouge: RougeVariant,
    /// Encoder used for `embed_f1`, by model name.
    #[serde(default)]
    pub embedder: Option<String>,
    #[serde(default)]
    pub external_scorer: Option<ExternalScorerConfig>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metrics: default_metrics(),
            rouge: RougeVariant::default(),
            embedder: None,
            external_scorer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub id: String,
    /// Opaque token the annotator presents to the service.
    pub token: String,
    /// Cap on the annotator's queue length.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Only queue samples generated with this token budget.
    #[serde(default)]
    pub only_budget: Option<u32>,
}

fn default_per_config() -> usize {
    50
}

fn default_journal() -> PathBuf {
    PathBuf::from("annotations.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSection {
    #[serde(default = "default_per_config")]
    pub per_config: usize,
    #[serde(default)]
    pub annotators: Vec<AnnotatorConfig>,
    /// Relative to the output directory.
    #[serde(default = "default_journal")]
    pub journal: PathBuf,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

impl Default for CampaignSection {
    fn default() -> Self {
        CampaignSection {
            per_config: default_per_config(),
            annotators: Vec::new(),
            journal: default_journal(),
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub dataset: DatasetSection,
    pub kb: KbSection,
    #[serde(default)]
    pub encoders: Vec<EmbedderConfig>,
    pub backends: Vec<BackendConfig>,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub campaign: CampaignSection,
}

/// A validated configuration plus the directory its relative paths resolve
/// against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

fn prefix(field: String, err: Error) -> Error {
    match err {
        Error::Config { field: f, message } => Error::Config {
            field: format!("{field}.{f}"),
            message,
        },
        other => Error::Config {
            field,
            message: other.to_string(),
        },
    }
}

fn unique<'a>(field: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::config(field, format!("duplicate name {n:?}")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::config(format!("line {line}"), e.message().to_string())
        })
    }

    /// Stable hash of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn configurations(&self) -> Vec<Configuration> {
        enumerate_configurations(
            &self.backends,
            &self.generation.modes,
            &self
                .encoders
                .iter()
                .map(|e| e.model_name.clone())
                .collect::<Vec<_>>(),
            &self.generation.budgets,
        )
    }

    pub fn ratios(&self) -> Result<SplitRatios> {
        let [a, b, c] = self.dataset.ratios;
        SplitRatios::new(a, b, c).map_err(|e| prefix("dataset.ratios".into(), e))
    }

    /// Checks every section; errors name the offending field path.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        let exists = |field: &str, p: &Path| -> Result<()> {
            let full = base_dir.join(p);
            if full.exists() {
                Ok(())
            } else {
                Err(Error::config(
                    field,
                    format!("{} does not exist", full.display()),
                ))
            }
        };
        exists("dataset.path", &self.dataset.path)?;
        self.ratios()?;
        if self.dataset.eval_split == Split::Unassigned {
            return Err(Error::config(
                "dataset.eval_split",
                "must be train, validation or test",
            ));
        }
        if self.dataset.max_terms == Some(0) {
            return Err(Error::config("dataset.max_terms", "must be > 0"));
        }

        match &self.kb.source {
            WikiSource::Recorded { bundle } => exists("kb.source.bundle", bundle)?,
            WikiSource::Http(h) => {
                if !h.base_url.contains("{lang}") && !h.base_url.starts_with("http") {
                    return Err(Error::config("kb.source.base_url", "not a URL"));
                }
                if h.offline && h.cache_dir.is_none() {
                    return Err(Error::config(
                        "kb.source.cache_dir",
                        "required when offline",
                    ));
                }
            }
        }
        if self.kb.top_n == 0 {
            return Err(Error::config("kb.top_n", "must be > 0"));
        }
        if self.kb.line_limit == 0 {
            return Err(Error::config("kb.line_limit", "must be > 0"));
        }
        if self.kb.workers == 0 {
            return Err(Error::config("kb.workers", "must be > 0"));
        }
        if self.kb.chunk_tokens < crate::corpus::MIN_CHUNK_TOKENS {
            return Err(Error::config(
                "kb.chunk_tokens",
                format!("must be at least {}", crate::corpus::MIN_CHUNK_TOKENS),
            ));
        }

        for (i, e) in self.encoders.iter().enumerate() {
            e.validate()
                .map_err(|err| prefix(format!("encoders[{i}]"), err))?;
        }
        unique(
            "encoders",
            self.encoders.iter().map(|e| e.model_name.as_str()),
        )?;
        if self.backends.is_empty() {
            return Err(Error::config(
                "backends",
                "at least one backend is required",
            ));
        }
        for (i, b) in self.backends.iter().enumerate() {
            b.validate()
                .map_err(|err| prefix(format!("backends[{i}]"), err))?;
        }
        unique(
            "backends",
            self.backends.iter().map(|b| b.model_name.as_str()),
        )?;

        let g = &self.generation;
        if g.modes.is_empty() {
            return Err(Error::config("generation.modes", "must not be empty"));
        }
        if g.modes.contains(&Mode::Rag) && self.encoders.is_empty() {
            return Err(Error::config(
                "encoders",
                "rag mode needs at least one encoder",
            ));
        }
        if g.budgets.is_empty() || g.budgets.contains(&0) {
            return Err(Error::config(
                "generation.budgets",
                "budgets must be non-empty and > 0",
            ));
        }
        if g.k == 0 {
            return Err(Error::config("generation.k", "must be > 0"));
        }
        if g.workers == 0 {
            return Err(Error::config("generation.workers", "must be > 0"));
        }
        if let Some(p) = &g.base_template {
            exists("generation.base_template", p)?;
        }
        if let Some(p) = &g.rag_template {
            exists("generation.rag_template", p)?;
        }

        let e = &self.eval;
        if e.metrics.is_empty() {
            return Err(Error::config("eval.metrics", "must not be empty"));
        }
        if e.metrics.contains(&MetricKind::EmbedF1) {
            match &e.embedder {
                None => return Err(Error::config("eval.embedder", "required for embed_f1")),
                Some(name) if !self.encoders.iter().any(|x| &x.model_name == name) => {
                    return Err(Error::config(
                        "eval.embedder",
                        format!("no encoder named {name:?}"),
                    ))
                }
                _ => {}
            }
        }
        if e.metrics.contains(&MetricKind::ExternalScorer) && e.external_scorer.is_none() {
            return Err(Error::config(
                "eval.external_scorer",
                "required for external_scorer",
            ));
        }

        let c = &self.campaign;
        if c.per_config == 0 {
            return Err(Error::config("campaign.per_config", "must be > 0"));
        }
        for (i, a) in c.annotators.iter().enumerate() {
            if a.id.trim().is_empty() {
                return Err(Error::config(
                    format!("campaign.annotators[{i}].id"),
                    "must not be empty",
                ));
            }
            if a.token.trim().is_empty() {
                return Err(Error::config(
                    format!("campaign.annotators[{i}].token"),
                    "must not be empty",
                ));
            }
        }
        unique(
            "campaign.annotators",
            c.annotators.iter().map(|a| a.id.as_str()),
        )?;
        unique(
            "campaign.annotators",
            c.annotators.iter().map(|a| a.token.as_str()),
        )?;
        Ok(())
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        let config = RunConfig::parse(&text)?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        config.validate(&base_dir)?;
        Ok(LoadedConfig { config, base_dir })
    }

    /// Applies a `--seed` override.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.config.seed = s;
        }
        self
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }
}
