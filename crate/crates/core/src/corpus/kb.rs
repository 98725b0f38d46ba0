use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use super::wiki::WikiClient;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbDocument {
    pub term: String,
    pub page_title: String,
    /// 1-based rank among the documents kept for this term.
    pub rank: usize,
    pub lines: Vec<String>,
    pub source_url: String,
    pub fetched_at: DateTime<Utc>,
}

impl KbDocument {
    pub fn id(&self) -> String {
        format!("{}#{}", self.term, self.rank)
    }

    pub fn text(&self) -> String {
        self.lines.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbParams {
    pub top_n: usize,
    pub line_limit: usize,
    pub language: String,
    /// Search hits requested per term before title filtering.
    pub search_limit: usize,
    pub workers: usize,
}

impl Default for KbParams {
    fn default() -> Self {
        KbParams {
            top_n: 3,
            line_limit: 20,
            language: "fr".into(),
            search_limit: 10,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbBuild {
    pub documents: Vec<KbDocument>,
    /// Terms for which no page title matched.
    pub misses: Vec<String>,
    /// Terms whose lookup failed, with the error.
    pub failures: Vec<(String, String)>,
}

impl KbBuild {
    pub fn line_count(&self) -> usize {
        self.documents.iter().map(|d| d.lines.len()).sum()
    }
}

/// Case-folds, strips combining diacritics (after NFD) and collapses
/// whitespace.
pub fn normalize_title(s: &str) -> String {
    let stripped: String = s
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .collect::<String>()
        .to_lowercase();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whether the normalized title contains the normalized term.
pub fn title_matches(title: &str, term: &str) -> bool {
    let term = normalize_title(term);
    !term.is_empty() && normalize_title(title).contains(&term)
}

enum TermOutcome {
    Found(Vec<KbDocument>),
    Miss,
    Failed(String),
}

fn fetch_term(term: &str, client: &dyn WikiClient, params: &KbParams) -> Result<Vec<KbDocument>> {
    let titles = client.search(&params.language, term, params.search_limit)?;
    let mut seen = Vec::new();
    let mut docs = Vec::new();
    for title in titles {
        if docs.len() >= params.top_n {
            break;
        }
        if !title_matches(&title, term) || seen.contains(&title) {
            continue;
        }
        seen.push(title.clone());
        let Some(page) = client.page(&params.language, &title)? else {
            continue;
        };
        let lines: Vec<String> = page
            .extract
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .take(params.line_limit)
            .map(str::to_string)
            .collect();
        if lines.is_empty() {
            continue;
        }
        docs.push(KbDocument {
            term: term.to_string(),
            page_title: title,
            rank: docs.len() + 1,
            lines,
            source_url: page.url,
            fetched_at: page.fetched_at,
        });
    }
    Ok(docs)
}

/// Builds the knowledge base: per term, up to `top_n` search hits whose
/// title contains the term (see [`title_matches`]), each cut to its first
/// `line_limit` non-empty lines. Terms are fetched by a bounded pool of
/// workers; output follows input term order.
pub fn build_kb(terms: &[String], client: &dyn WikiClient, params: &KbParams) -> Result<KbBuild> {
    if terms.is_empty() {
        return Err(Error::InvalidArgument("no terms to look up".into()));
    }
    if params.top_n == 0 || params.line_limit == 0 {
        return Err(Error::InvalidArgument(
            "top_n and line_limit must be positive".into(),
        ));
    }
    let outcomes: Mutex<Vec<Option<TermOutcome>>> =
        Mutex::new((0..terms.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = params.workers.clamp(1, terms.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= terms.len() {
                    break;
                }
                let outcome = match fetch_term(&terms[i], client, params) {
                    Ok(docs) if docs.is_empty() => TermOutcome::Miss,
                    Ok(docs) => TermOutcome::Found(docs),
                    Err(e) => {
                        tracing::warn!(term = %terms[i], error = %e, "knowledge-base lookup failed");
                        TermOutcome::Failed(e.to_string())
                    }
                };
                outcomes.lock().expect("outcome lock poisoned")[i] = Some(outcome);
            });
        }
    });

    let mut build = KbBuild::default();
    for (term, outcome) in terms
        .iter()
        .zip(outcomes.into_inner().expect("outcome lock"))
    {
        match outcome.expect("every term processed") {
            TermOutcome::Found(docs) => build.documents.extend(docs),
            TermOutcome::Miss => build.misses.push(term.clone()),
            TermOutcome::Failed(e) => build.failures.push((term.clone(), e)),
        }
    }
    Ok(build)
}

pub fn write_kb_jsonl(path: &Path, docs: &[KbDocument]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_kb_jsonl(path: &Path) -> Result<Vec<KbDocument>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(
            serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
                path: path.to_path_buf(),
                row: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(docs)
}

/// One term per line.
pub fn write_misses(path: &Path, misses: &[String]) -> Result<()> {
    let mut text = misses.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
