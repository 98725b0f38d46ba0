//! Wikipedia access: a MediaWiki API client with an on-disk response cache,
//! and a replay client over a recorded bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::excerpt;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WikiPage {
    pub title: String,
    /// Plain-text extract, lines separated by `\n`.
    pub extract: String,
    pub url: String,
    pub fetched_at: DateTime<Utc>,
}

pub trait WikiClient: Send + Sync {
    /// Page titles for a full-text search, best match first.
    fn search(&self, language: &str, query: &str, limit: usize) -> Result<Vec<String>>;

    /// `Ok(None)` when the page does not exist.
    fn page(&self, language: &str, title: &str) -> Result<Option<WikiPage>>;
}

fn default_base_url() -> String {
    "https://{lang}.wikipedia.org/w/api.php".to_string()
}

fn default_retries() -> u32 {
    3
}

fn default_timeout_ms() -> u64 {
    20_000
}

fn default_min_interval_ms() -> u64 {
    100
}

fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpWikiConfig {
    /// API endpoint; `{lang}` is replaced by the language code.
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Serve from the cache only; a miss is an error.
    #[serde(default)]
    pub offline: bool,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Minimum spacing between requests to the host, across all workers.
    #[serde(default = "default_min_interval_ms")]
    pub min_interval_ms: u64,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub user_agent: Option<String>,
}

impl Default for HttpWikiConfig {
    fn default() -> Self {
        HttpWikiConfig {
            base_url: default_base_url(),
            cache_dir: None,
            offline: false,
            retries: default_retries(),
            timeout_ms: default_timeout_ms(),
            min_interval_ms: default_min_interval_ms(),
            backoff_ms: default_backoff_ms(),
            user_agent: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    language: String,
    kind: String,
    key: String,
    fetched_at: DateTime<Utc>,
    body: serde_json::Value,
}

#[derive(Debug, Deserialize)]
struct SearchResponse {
    query: SearchQuery,
}

#[derive(Debug, Deserialize)]
struct SearchQuery {
    #[serde(default)]
    search: Vec<SearchHit>,
}

#[derive(Debug, Deserialize)]
struct SearchHit {
    title: String,
}

#[derive(Debug, Deserialize)]
struct PageResponse {
    query: PageQuery,
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    #[serde(default)]
    pages: Vec<ApiPage>,
}

#[derive(Debug, Deserialize)]
struct ApiPage {
    title: String,
    #[serde(default)]
    missing: bool,
    #[serde(default)]
    extract: Option<String>,
    #[serde(default)]
    fullurl: Option<String>,
}

/// MediaWiki action-API client (`formatversion=2`).
pub struct HttpWikiClient {
    cfg: HttpWikiConfig,
    agent: ureq::Agent,
    last_request: Mutex<Option<Instant>>,
}

enum Attempt {
    Done(serde_json::Value),
    Retry { wait: Duration, error: String },
    Fatal(String),
}

impl HttpWikiClient {
    pub fn new(cfg: HttpWikiConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .user_agent(
                cfg.user_agent
                    .clone()
                    .unwrap_or_else(|| format!("prage/{}", env!("CARGO_PKG_VERSION"))),
            )
            .build()
            .new_agent();
        HttpWikiClient {
            cfg,
            agent,
            last_request: Mutex::new(None),
        }
    }

    fn endpoint(&self, language: &str) -> String {
        self.cfg.base_url.replace("{lang}", language)
    }

    fn cache_path(&self, language: &str, kind: &str, key: &str) -> Option<PathBuf> {
        let dir = self.cfg.cache_dir.as_ref()?;
        let mut h = Sha256::new();
        h.update(language.as_bytes());
        h.update([0x1f]);
        h.update(kind.as_bytes());
        h.update([0x1f]);
        h.update(key.as_bytes());
        Some(dir.join(format!("{}.json", hex::encode(h.finalize()))))
    }

    fn throttle(&self) {
        let interval = Duration::from_millis(self.cfg.min_interval_ms);
        let mut last = self.last_request.lock().expect("throttle lock poisoned");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn attempt(&self, url: &str, params: &[(&str, &str)], attempt: u32) -> Attempt {
        self.throttle();
        let mut req = self.agent.get(url);
        for (k, v) in params {
            req = req.query(*k, *v);
        }
        let backoff = Duration::from_millis(self.cfg.backoff_ms << attempt.min(8));
        let mut resp = match req.call() {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    wait: backoff,
                    error: e.to_string(),
                }
            }
        };
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(|s| Duration::from_secs(s.min(120)));
        let body = match resp.body_mut().read_to_string() {
            Ok(b) => b,
            Err(e) => {
                return Attempt::Retry {
                    wait: backoff,
                    error: e.to_string(),
                }
            }
        };
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry {
                wait: retry_after.unwrap_or(backoff),
                error: format!("status {status}"),
            };
        }
        if !status.is_success() {
            return Attempt::Fatal(format!("status {status}: {}", excerpt(&body)));
        }
        match serde_json::from_str::<serde_json::Value>(&body) {
            Ok(v) => {
                // MediaWiki reports throttling inside a 200 response.
                if v.pointer("/error/code").and_then(|c| c.as_str()) == Some("ratelimited") {
                    Attempt::Retry {
                        wait: retry_after.unwrap_or(backoff),
                        error: "ratelimited".into(),
                    }
                } else {
                    Attempt::Done(v)
                }
            }
            Err(e) => Attempt::Fatal(format!("invalid JSON ({e}): {}", excerpt(&body))),
        }
    }

    /// Fetches (or replays from cache) one API response.
    fn fetch(
        &self,
        language: &str,
        kind: &str,
        key: &str,
        params: &[(&str, &str)],
    ) -> Result<(serde_json::Value, DateTime<Utc>)> {
        let cache_path = self.cache_path(language, kind, key);
        if let Some(p) = &cache_path {
            if p.exists() {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let entry: CacheEntry = serde_json::from_str(&text)?;
                return Ok((entry.body, entry.fetched_at));
            }
        }
        if self.cfg.offline {
            return Err(Error::Http(format!(
                "offline cache miss for {kind} {key:?} ({language})"
            )));
        }
        let url = self.endpoint(language);
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            match self.attempt(&url, params, attempt) {
                Attempt::Done(body) => {
                    let fetched_at = Utc::now();
                    if let Some(p) = &cache_path {
                        if let Some(dir) = p.parent() {
                            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                        }
                        let entry = CacheEntry {
                            language: language.into(),
                            kind: kind.into(),
                            key: key.into(),
                            fetched_at,
                            body: body.clone(),
                        };
                        let tmp = p.with_extension("json.tmp");
                        fs::write(&tmp, serde_json::to_vec_pretty(&entry)?)
                            .map_err(|e| Error::io(&tmp, e))?;
                        fs::rename(&tmp, p).map_err(|e| Error::io(p, e))?;
                    }
                    return Ok((body, fetched_at));
                }
                Attempt::Fatal(e) => return Err(Error::Http(format!("{url}: {e}"))),
                Attempt::Retry { wait, error } => {
                    tracing::warn!(attempt, %error, "wikipedia request failed");
                    last = error;
                    if attempt < self.cfg.retries {
                        std::thread::sleep(wait);
                    }
                }
            }
        }
        Err(Error::Http(format!(
            "{url}: giving up after {} attempts: {last}",
            self.cfg.retries + 1
        )))
    }
}

impl WikiClient for HttpWikiClient {
    fn search(&self, language: &str, query: &str, limit: usize) -> Result<Vec<String>> {
        let limit_s = limit.to_string();
        let (body, _) = self.fetch(
            language,
            "search",
            &format!("{query}\u{1f}{limit}"),
            &[
                ("action", "query"),
                ("list", "search"),
                ("srsearch", query),
                ("srlimit", &limit_s),
                ("format", "json"),
                ("formatversion", "2"),
            ],
        )?;
        let parsed: SearchResponse = serde_json::from_value(body)
            .map_err(|e| Error::Http(format!("unexpected search response: {e}")))?;
        Ok(parsed.query.search.into_iter().map(|h| h.title).collect())
    }

    fn page(&self, language: &str, title: &str) -> Result<Option<WikiPage>> {
        let (body, fetched_at) = self.fetch(
            language,
            "page",
            title,
            &[
                ("action", "query"),
                ("prop", "extracts|info"),
                ("explaintext", "1"),
                ("inprop", "url"),
                ("redirects", "1"),
                ("titles", title),
                ("format", "json"),
                ("formatversion", "2"),
            ],
        )?;
        let parsed: PageResponse = serde_json::from_value(body)
            .map_err(|e| Error::Http(format!("unexpected page response: {e}")))?;
        Ok(parsed
            .query
            .pages
            .into_iter()
            .find(|p| !p.missing)
            .map(|p| WikiPage {
                url: p.fullurl.unwrap_or_default(),
                extract: p.extract.unwrap_or_default(),
                title: p.title,
                fetched_at,
            }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedPage {
    pub extract: String,
    pub url: String,
    pub fetched_at: DateTime<Utc>,
}

/// Recorded search results and pages for one language.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WikiBundle {
    pub language: String,
    pub search: BTreeMap<String, Vec<String>>,
    pub pages: BTreeMap<String, RecordedPage>,
}

/// Replays a [`WikiBundle`]; unknown queries return no hits.
pub struct RecordedWikiClient {
    bundle: WikiBundle,
}

impl RecordedWikiClient {
    pub fn new(bundle: WikiBundle) -> Self {
        RecordedWikiClient { bundle }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(serde_json::from_str(&text)?))
    }

    fn check_language(&self, language: &str) -> Result<()> {
        if language != self.bundle.language {
            return Err(Error::InvalidArgument(format!(
                "recorded bundle is for language {:?}, requested {language:?}",
                self.bundle.language
            )));
        }
        Ok(())
    }
}

impl WikiClient for RecordedWikiClient {
    fn search(&self, language: &str, query: &str, limit: usize) -> Result<Vec<String>> {
        self.check_language(language)?;
        Ok(self
            .bundle
            .search
            .get(query)
            .map(|v| v.iter().take(limit).cloned().collect())
            .unwrap_or_default())
    }

    fn page(&self, language: &str, title: &str) -> Result<Option<WikiPage>> {
        self.check_language(language)?;
        Ok(self.bundle.pages.get(title).map(|p| WikiPage {
            title: title.to_string(),
            extract: p.extract.clone(),
            url: p.url.clone(),
            fetched_at: p.fetched_at,
        }))
    }
}
