//! Exhaustive-scan cosine index over chunk embeddings.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic    b"PRGIDX\0\0"
//! version  u32 (= 1)
//! dim      u32
//! count    u64
//! vectors  count * dim f32
//! refs     count * (u32 byte length, UTF-8 bytes)
//! ```

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Chunk;
use crate::embed::{dot, Embedder, EmbeddingVector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PRGIDX\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    refs: Vec<String>,
    /// Row-major, `refs.len() * dim` values.
    vectors: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk_ref: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub hits: Vec<Hit>,
    pub query_text: String,
    pub k: usize,
}

/// Descending score, then ascending chunk ref.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.chunk_ref.cmp(&b.chunk_ref))
}

impl VectorIndex {
    pub fn from_entries(dim: usize, entries: Vec<(String, EmbeddingVector)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("cannot index zero entries".into()));
        }
        let mut refs = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (r, v) in entries {
            if v.values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.values.len(),
                });
            }
            if !v.normalized {
                return Err(Error::InvalidArgument(format!(
                    "vector for {r} is not normalized"
                )));
            }
            refs.push(r);
            vectors.extend_from_slice(&v.values);
        }
        Ok(VectorIndex { dim, refs, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn metric(&self) -> SimilarityMetric {
        SimilarityMetric::Cosine
    }

    pub fn refs(&self) -> &[String] {
        &self.refs
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Top-`k` entries by cosine similarity to `query`, scores clamped to
    /// [-1, 1], ties broken by ascending chunk ref.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if query.values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.values.len(),
            });
        }
        let mut hits: Vec<Hit> = (0..self.len())
            .map(|i| Hit {
                chunk_ref: self.refs[i].clone(),
                score: dot(self.vector(i), &query.values).clamp(-1.0, 1.0),
            })
            .collect();
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, hit_order);
            hits.truncate(k);
        }
        hits.sort_by(hit_order);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.vectors.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.refs.len() as u64).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.refs {
            out.extend_from_slice(&(r.len() as u32).to_le_bytes());
            out.extend_from_slice(r.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::IndexFormat("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::IndexFormat(format!("unsupported version {version}")));
        }
        let dim = cur.u32()? as usize;
        let count = cur.u64()? as usize;
        if dim == 0 || count == 0 {
            return Err(Error::IndexFormat("empty index".into()));
        }
        let n_values = dim
            .checked_mul(count)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::IndexFormat("truncated vector block".into()))?;
        let mut vectors = Vec::with_capacity(n_values);
        for _ in 0..n_values {
            vectors.push(f32::from_le_bytes(
                cur.take(4)?.try_into().expect("4 bytes"),
            ));
        }
        let mut refs = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let raw = cur.take(len)?;
            refs.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| Error::IndexFormat("chunk ref is not UTF-8".into()))?,
            );
        }
        if cur.pos != bytes.len() {
            return Err(Error::IndexFormat("trailing bytes".into()));
        }
        Ok(VectorIndex { dim, refs, vectors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::IndexFormat("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Embeds every chunk, 64 at a time, and indexes it under its id.
pub fn build_index(chunks: &[Chunk], embedder: &dyn Embedder) -> Result<VectorIndex> {
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("no chunks to index".into()));
    }
    let mut entries = Vec::with_capacity(chunks.len());
    for batch in chunks.chunks(64) {
        let texts: Vec<&str> = batch.iter().map(|c| c.text.as_str()).collect();
        let vectors = embedder.embed_batch(&texts).map_err(|e| Error::Embedding {
            id: batch[0].id.clone(),
            message: e.to_string(),
        })?;
        entries.extend(batch.iter().map(|c| c.id.clone()).zip(vectors));
    }
    VectorIndex::from_entries(embedder.dim(), entries)
}

/// Embeds `text` and returns its top-`k` chunks.
pub fn query(
    index: &VectorIndex,
    text: &str,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<RetrievedContext> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("index is empty".into()));
    }
    let q = embedder.embed_text(text).map_err(|e| Error::Embedding {
        id: text.to_string(),
        message: e.to_string(),
    })?;
    Ok(RetrievedContext {
        hits: index.search(&q, k)?,
        query_text: text.to_string(),
        k,
    })
}
