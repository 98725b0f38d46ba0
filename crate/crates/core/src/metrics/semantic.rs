//! Embedding-based scores: greedy token matching and an optional external
//! scorer endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::lexical::Prf;
use crate::embed::{excerpt, Embedder, EmbeddingVector};
use crate::error::{Error, Result};

/// Greedy matching over already-embedded tokens. Each candidate token takes
/// its best `max(0, cos)` against the reference tokens (precision) and vice
/// versa (recall).
pub fn greedy_match(candidate: &[EmbeddingVector], reference: &[EmbeddingVector]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::default();
    }
    let best = |from: &[EmbeddingVector], to: &[EmbeddingVector]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|a| to.iter().map(|b| a.cosine(b).max(0.0)).fold(0.0, f64::max))
            .sum();
        total / from.len() as f64
    };
    Prf::new(best(candidate, reference), best(reference, candidate))
}

fn token_vectors(embedder: &dyn Embedder, text: &str) -> Result<Vec<EmbeddingVector>> {
    match embedder.embed_tokens(text) {
        Ok(pairs) => Ok(pairs.into_iter().map(|(_, v)| v).collect()),
        Err(Error::NoTokens(_)) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

/// Token-level embedding F1. Texts with no tokens score 0.
pub fn embed_f1(candidate: &str, reference: &str, embedder: &dyn Embedder) -> Result<Prf> {
    let c = token_vectors(embedder, candidate)?;
    let r = token_vectors(embedder, reference)?;
    Ok(greedy_match(&c, &r))
}

pub(crate) fn embed_tokens_or_empty(
    embedder: &dyn Embedder,
    text: &str,
) -> Result<Vec<EmbeddingVector>> {
    token_vectors(embedder, text)
}

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    candidate: &'a str,
    reference: &'a str,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    score: f64,
}

/// Client for a learned-metric service: `POST {"candidate", "reference"}`
/// returning `{"score"}`.
pub struct ExternalScorer {
    url: String,
    agent: ureq::Agent,
    retries: u32,
}

impl ExternalScorer {
    pub fn new(url: &str, timeout_ms: u64, retries: u32) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        ExternalScorer {
            url: url.to_string(),
            agent,
            retries,
        }
    }

    fn post_once(&self, candidate: &str, reference: &str) -> std::result::Result<f64, String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(ScoreRequest {
                candidate,
                reference,
            })
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("status {status}: {}", excerpt(&body)));
        }
        let parsed: ScoreResponse =
            serde_json::from_str(&body).map_err(|e| format!("{e}: {}", excerpt(&body)))?;
        if !parsed.score.is_finite() {
            return Err(format!("non-finite score: {}", excerpt(&body)));
        }
        Ok(parsed.score)
    }

    pub fn score(&self, candidate: &str, reference: &str) -> Result<f64> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.post_once(candidate, reference) {
                Ok(s) => return Ok(s),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "external scorer failed");
                    last = e;
                }
            }
        }
        Err(Error::Http(format!("external scorer {}: {last}", self.url)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashingEmbedder;

    #[test]
    fn identity_is_one() {
        let e = HashingEmbedder::new("t", 64);
        let s = embed_f1("le coeur bat", "le coeur bat", &e).unwrap();
        assert!((s.f1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn disjoint_alphabets_near_zero() {
        // Latin vs Greek tokens share no trigrams; with dim 1024 the signed
        // hash buckets collide rarely, so every max(0, cos) is 0 or tiny.
        let e = HashingEmbedder::new("t", 1024);
        let s = embed_f1("abc def ghi", "αβγ δεζ ηθι", &e).unwrap();
        let c = e.embed_tokens("abc def ghi").unwrap();
        let r = e.embed_tokens("αβγ δεζ ηθι").unwrap();
        let mut expected_p = 0.0;
        for (_, a) in &c {
            expected_p += r
                .iter()
                .map(|(_, b)| a.cosine(b).max(0.0))
                .fold(0.0, f64::max);
        }
        expected_p /= 3.0;
        assert!((s.precision - expected_p).abs() < 1e-12);
        assert!(s.f1 < 0.1, "f1 = {}", s.f1);
    }

    #[test]
    fn recall_is_invariant_to_reference_order() {
        let e = HashingEmbedder::new("t", 64);
        let a = embed_f1("tension du sang", "pression sanguine élevée", &e).unwrap();
        let b = embed_f1("tension du sang", "élevée sanguine pression", &e).unwrap();
        assert!((a.recall - b.recall).abs() < 1e-12);
    }

    #[test]
    fn empty_text_scores_zero() {
        let e = HashingEmbedder::new("t", 16);
        assert_eq!(embed_f1("", "a", &e).unwrap(), Prf::default());
    }
}
