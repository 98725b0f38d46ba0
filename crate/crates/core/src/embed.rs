//! Text and token embeddings.
//!
//! Every vector leaving this module is L2-normalized, so cosine similarity is
//! a plain dot product everywhere downstream.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub dim: usize,
    pub normalized: bool,
}

impl EmbeddingVector {
    /// Normalizes `raw` to unit length. A zero vector is rejected.
    pub fn normalize(raw: &[f64]) -> Option<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(EmbeddingVector {
            values: raw.iter().map(|v| (v / norm) as f32).collect(),
            dim: raw.len(),
            normalized: true,
        })
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }

    /// Cosine similarity, clamped to [-1, 1].
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let mut d = self.dot(other);
        if !(self.normalized && other.normalized) {
            let n = self.norm() * other.norm();
            d = if n == 0.0 { 0.0 } else { d / n };
        }
        d.clamp(-1.0, 1.0)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Remote,
    DeterministicTest,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_batch_size() -> usize {
    32
}

fn default_retries() -> u32 {
    2
}

fn default_api_key_env() -> String {
    "PRAGE_API_KEY".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub dim: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    /// When set, every remote request/response pair is appended here as JSONL.
    #[serde(default)]
    pub record_path: Option<PathBuf>,
}

impl EmbedderConfig {
    pub fn deterministic(model_name: &str, dim: usize) -> Self {
        EmbedderConfig {
            kind: EmbedderKind::DeterministicTest,
            endpoint_url: None,
            model_name: model_name.to_string(),
            dim,
            timeout_ms: default_timeout_ms(),
            batch_size: default_batch_size(),
            retries: default_retries(),
            api_key_env: default_api_key_env(),
            record_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be > 0"));
        }
        if self.kind == EmbedderKind::Remote && self.endpoint_url.is_none() {
            return Err(Error::config(
                "endpoint_url",
                "required for remote embedders",
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::DeterministicTest => {
                Box::new(HashingEmbedder::new(&self.model_name, self.dim))
            }
            EmbedderKind::Remote => Box::new(RemoteEmbedder::new(self.clone())?),
        })
    }
}

pub trait Embedder: Send + Sync {
    fn model_name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Embeds `texts` in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty text".into()));
        }
        let mut out = self.embed_batch(&[text])?;
        out.pop().ok_or_else(|| Error::Embedding {
            id: text.to_string(),
            message: "endpoint returned no vectors".into(),
        })
    }

    /// One vector per token of the shared metrics tokenizer.
    fn embed_tokens(&self, text: &str) -> Result<Vec<(String, EmbeddingVector)>> {
        let tokens = tokenize(text).tokens;
        if tokens.is_empty() {
            return Err(Error::NoTokens(text.to_string()));
        }
        let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
        let vectors = self.embed_batch(&refs)?;
        Ok(tokens.into_iter().zip(vectors).collect())
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed_batch(texts)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Offline embedder: character trigrams of the text padded with one space
/// on each side are hashed with FNV-1a over their UTF-8 bytes. The bucket is
/// `hash % dim` and the sign is bit 0 of `mix64(hash)` (set = negative).
/// Signed counts are then L2-normalized. If the counts cancel to zero the
/// vector is the unit basis vector at `fnv1a64(text) % dim`.
///
/// The text is used verbatim (no case folding), so the output is a pure
/// function of `(text, dim)`.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    model_name: String,
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(model_name: &str, dim: usize) -> Self {
        assert!(dim > 0, "dim must be positive");
        HashingEmbedder {
            model_name: model_name.to_string(),
            dim,
        }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let padded: Vec<char> = std::iter::once(' ')
            .chain(text.chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut counts = vec![0f64; self.dim];
        let mut buf = [0u8; 12];
        for gram in padded.windows(3) {
            let mut len = 0;
            for c in gram {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a64(&buf[..len]);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if mix64(h) & 1 == 1 { -1.0 } else { 1.0 };
            counts[bucket] += sign;
        }
        EmbeddingVector::normalize(&counts).unwrap_or_else(|| {
            let mut basis = vec![0f64; self.dim];
            basis[(fnv1a64(text.as_bytes()) % self.dim as u64) as usize] = 1.0;
            EmbeddingVector::normalize(&basis).expect("basis vector has unit norm")
        })
    }
}

impl Embedder for HashingEmbedder {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub model: String,
    pub input: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingDatum {
    pub embedding: Vec<f64>,
}

/// One line of a recording file.
#[derive(Debug, Serialize, Deserialize)]
pub struct RecordedExchange {
    pub request: EmbeddingRequest,
    pub response: EmbeddingResponse,
}

/// Client for an HTTP embeddings endpoint speaking
/// `{"model", "input": [..]} -> {"data": [{"embedding": [..]}]}`.
pub struct RemoteEmbedder {
    cfg: EmbedderConfig,
    endpoint: String,
    agent: ureq::Agent,
    api_key: Option<String>,
    recorder: Option<Mutex<std::fs::File>>,
}

impl RemoteEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let endpoint = cfg
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::config("endpoint_url", "required for remote embedders"))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let api_key = std::env::var(&cfg.api_key_env).ok();
        let recorder = match &cfg.record_path {
            Some(p) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            )),
            None => None,
        };
        Ok(RemoteEmbedder {
            cfg,
            endpoint,
            agent,
            api_key,
            recorder,
        })
    }

    fn post(&self, body: &EmbeddingRequest) -> std::result::Result<EmbeddingResponse, String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("status {status}: {}", excerpt(&text)));
        }
        serde_json::from_str(&text).map_err(|e| format!("{e}: {}", excerpt(&text)))
    }

    fn embed_chunk(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let body = EmbeddingRequest {
            model: self.cfg.model_name.clone(),
            input: texts.iter().map(|t| t.to_string()).collect(),
        };
        let mut last_err = String::new();
        let mut response = None;
        for attempt in 0..=self.cfg.retries {
            match self.post(&body) {
                Ok(r) => {
                    response = Some(r);
                    break;
                }
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "embedding request failed");
                    last_err = e;
                    if attempt < self.cfg.retries {
                        std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                    }
                }
            }
        }
        let response = response.ok_or_else(|| Error::Embedding {
            id: texts.first().map(|t| t.to_string()).unwrap_or_default(),
            message: last_err,
        })?;
        if response.data.len() != texts.len() {
            return Err(Error::Embedding {
                id: texts.first().map(|t| t.to_string()).unwrap_or_default(),
                message: format!(
                    "expected {} vectors, endpoint returned {}",
                    texts.len(),
                    response.data.len()
                ),
            });
        }
        let mut out = Vec::with_capacity(texts.len());
        for (datum, text) in response.data.iter().zip(texts) {
            if datum.embedding.len() != self.cfg.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.cfg.dim,
                    actual: datum.embedding.len(),
                });
            }
            out.push(EmbeddingVector::normalize(&datum.embedding).ok_or_else(|| {
                Error::Embedding {
                    id: text.to_string(),
                    message: "endpoint returned a zero vector".into(),
                }
            })?);
        }
        if let Some(rec) = &self.recorder {
            let line = serde_json::to_string(&RecordedExchange {
                request: body,
                response,
            })?;
            let mut f = rec.lock().expect("recorder lock poisoned");
            writeln!(f, "{line}")
                .map_err(|e| Error::io(self.cfg.record_path.clone().unwrap_or_default(), e))?;
        }
        Ok(out)
    }
}

pub(crate) fn excerpt(text: &str) -> String {
    let mut s: String = text.chars().take(200).collect();
    if s.len() < text.len() {
        s.push('…');
    }
    s
}

impl Embedder for RemoteEmbedder {
    fn model_name(&self) -> &str {
        &self.cfg.model_name
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.cfg.batch_size) {
            out.extend(self.embed_chunk(chunk)?);
        }
        Ok(out)
    }
}
