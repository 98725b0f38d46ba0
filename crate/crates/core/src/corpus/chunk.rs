//! Retrieval units cut from knowledge-base documents.
//!
//! Token counts use the metrics tokenizer. Chunk text is whitespace-normalized
//! (runs of whitespace become one space), so joining a document's chunks with
//! single spaces, or with nothing where `joins_previous` is set, gives back
//! the document text under that same normalization.

use serde::{Deserialize, Serialize};

use super::kb::KbDocument;
use crate::error::{Error, Result};
use crate::metrics::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Line,
    #[default]
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// `<doc_ref>#<index:04>`; sorts in document order.
    pub id: String,
    pub doc_ref: String,
    pub index: usize,
    pub text: String,
    pub token_count: usize,
    /// The chunk continues a word split from the previous chunk.
    #[serde(default)]
    pub joins_previous: bool,
}

pub const MIN_CHUNK_TOKENS: usize = 16;

fn token_count(s: &str) -> usize {
    tokenize(s).len()
}

/// Splits after `.`, `!`, `?` or `…` when followed by whitespace.
fn sentences(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?' | '…') && chars.peek().is_some_and(|n| n.is_whitespace()) {
            out.push(std::mem::take(&mut current));
        }
    }
    out.push(current);
    out.into_iter()
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Pieces of one unit with at most `max_tokens` tokens each, paired with
/// whether the piece continues the previous one without a space.
fn pack(unit: &str, max_tokens: usize) -> Vec<(String, bool)> {
    let mut out: Vec<(String, bool)> = Vec::new();
    let mut current = String::new();
    let mut current_tokens = 0;
    for word in unit.split_whitespace() {
        let n = token_count(word);
        if n > max_tokens {
            if !current.is_empty() {
                out.push((std::mem::take(&mut current), false));
                current_tokens = 0;
            }
            let mut first = true;
            let mut piece = String::new();
            for c in word.chars() {
                piece.push(c);
                if token_count(&piece) > max_tokens {
                    piece.pop();
                    out.push((std::mem::take(&mut piece), !first));
                    first = false;
                    piece.push(c);
                }
            }
            if !piece.is_empty() {
                out.push((piece, !first));
            }
            continue;
        }
        if current_tokens + n > max_tokens && !current.is_empty() {
            out.push((std::mem::take(&mut current), false));
            current_tokens = 0;
        }
        if !current.is_empty() {
            current.push(' ');
        }
        current.push_str(word);
        current_tokens += n;
    }
    if !current.is_empty() {
        out.push((current, false));
    }
    out
}

/// Cuts documents into chunks in document order; chunk indices restart at 0
/// for each document.
pub fn chunk_kb(
    docs: &[KbDocument],
    granularity: Granularity,
    max_tokens: usize,
) -> Result<Vec<Chunk>> {
    if max_tokens < MIN_CHUNK_TOKENS {
        return Err(Error::InvalidArgument(format!(
            "max_tokens must be at least {MIN_CHUNK_TOKENS}, got {max_tokens}"
        )));
    }
    let mut chunks = Vec::new();
    for doc in docs {
        let doc_ref = doc.id();
        let units: Vec<String> = doc
            .lines
            .iter()
            .flat_map(|line| match granularity {
                Granularity::Line => {
                    let l = line.split_whitespace().collect::<Vec<_>>().join(" ");
                    if l.is_empty() {
                        vec![]
                    } else {
                        vec![l]
                    }
                }
                Granularity::Sentence => sentences(line),
            })
            .collect();
        let mut index = 0;
        for unit in units {
            for (text, joins_previous) in pack(&unit, max_tokens) {
                chunks.push(Chunk {
                    id: format!("{doc_ref}#{index:04}"),
                    doc_ref: doc_ref.clone(),
                    index,
                    token_count: token_count(&text).max(1),
                    text,
                    joins_previous,
                });
                index += 1;
            }
        }
    }
    Ok(chunks)
}

/// Joins chunks (assumed to be one document's, in index order) back into
/// normalized text.
pub fn reassemble(chunks: &[Chunk]) -> String {
    let mut out = String::new();
    for (i, c) in chunks.iter().enumerate() {
        if i > 0 && !c.joins_previous {
            out.push(' ');
        }
        out.push_str(&c.text);
    }
    out
}
