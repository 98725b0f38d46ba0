//! Prompt rendering, backend calls and batch generation.

mod backend;
mod prompt;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::retriever::{self, VectorIndex};

pub use backend::{
    parse_completion, Backend, BackendConfig, BackendError, BackendKind, BackendReply, ChatMessage,
    ChatRequest, HttpBackend, MockBackend, MAX_RETRIES,
};
pub use prompt::{render_prompt, PromptTemplate, RenderedPrompt, BASE_FR, RAG_FR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BaseSlm,
    Rag,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::BaseSlm => "base_slm",
            Mode::Rag => "rag",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRun {
    pub query_id: String,
    pub config_id: String,
    pub term: String,
    pub mode: Mode,
    pub backend_model: String,
    pub encoder_name: Option<String>,
    pub max_tokens: u32,
    pub prompt_rendered: String,
    pub context_refs: Vec<String>,
    #[serde(default)]
    pub context_truncated: bool,
    /// Verbatim backend output, untrimmed.
    pub output_text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<serde_json::Value>,
}

/// One point of the (backend × mode × encoder × budget) grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    pub backend_model: String,
    pub fine_tuned: bool,
    pub mode: Mode,
    pub encoder_name: Option<String>,
    pub max_tokens: u32,
}

impl Configuration {
    /// `<model>|<mode>|<encoder or ->|<budget>`
    pub fn id(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.backend_model,
            self.mode,
            self.encoder_name.as_deref().unwrap_or("-"),
            self.max_tokens
        )
    }

    pub fn query_id(&self, term: &str) -> String {
        query_id(
            term,
            self.mode,
            &self.backend_model,
            self.max_tokens,
            self.encoder_name.as_deref(),
        )
    }
}

/// First 16 hex digits of SHA-256 over the unit-separator-joined fields.
pub fn query_id(
    term: &str,
    mode: Mode,
    backend_model: &str,
    max_tokens: u32,
    encoder_name: Option<&str>,
) -> String {
    let mut h = Sha256::new();
    for part in [
        term,
        &mode.to_string(),
        backend_model,
        &max_tokens.to_string(),
        encoder_name.unwrap_or(""),
    ] {
        h.update(part.as_bytes());
        h.update([0x1f]);
    }
    hex::encode(&h.finalize()[..8])
}

/// The configuration grid: per backend, base mode then rag with each
/// encoder, each at every budget.
pub fn enumerate_configurations(
    backends: &[BackendConfig],
    modes: &[Mode],
    encoders: &[String],
    budgets: &[u32],
) -> Vec<Configuration> {
    let mut out = Vec::new();
    for b in backends {
        let mut variants: Vec<(Mode, Option<String>)> = Vec::new();
        if modes.contains(&Mode::BaseSlm) {
            variants.push((Mode::BaseSlm, None));
        }
        if modes.contains(&Mode::Rag) {
            variants.extend(encoders.iter().map(|e| (Mode::Rag, Some(e.clone()))));
        }
        for (mode, encoder) in variants {
            for &max_tokens in budgets {
                out.push(Configuration {
                    backend_model: b.model_name.clone(),
                    fine_tuned: b.fine_tuned,
                    mode,
                    encoder_name: encoder.clone(),
                    max_tokens,
                });
            }
        }
    }
    out
}

/// Supplies ranked context passages for a query.
pub trait ContextSource: Send + Sync {
    /// `(chunk_ref, text)` pairs, best first.
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<(String, String)>>;
}

/// A vector index with the embedder that built it and the chunk texts.
pub struct IndexedContext<'a> {
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn Embedder,
    pub texts: HashMap<String, String>,
}

impl ContextSource for IndexedContext<'_> {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<(String, String)>> {
        let ctx = retriever::query(self.index, query, k, self.embedder)?;
        ctx.hits
            .into_iter()
            .map(|h| {
                let text = self.texts.get(&h.chunk_ref).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!("no text for chunk {}", h.chunk_ref))
                })?;
                Ok((h.chunk_ref, text))
            })
            .collect()
    }
}

fn map_finish(reason: Option<&str>) -> FinishReason {
    match reason {
        Some("length") | Some("max_tokens") => FinishReason::Length,
        _ => FinishReason::Stop,
    }
}

/// Sends the draft's prompt to the backend, retrying transport failures up
/// to `cfg.retries` times. Exhausted retries yield a run with
/// `finish_reason = error` and empty output; a malformed response is an
/// error.
pub fn generate(
    cfg: &BackendConfig,
    backend: &dyn Backend,
    draft: GenerationRun,
) -> Result<GenerationRun> {
    if draft.prompt_rendered.is_empty() {
        return Err(Error::InvalidArgument(
            "draft has no rendered prompt".into(),
        ));
    }
    if draft.max_tokens == 0 {
        return Err(Error::InvalidArgument(
            "max_tokens must be at least 1".into(),
        ));
    }
    let req = ChatRequest::user(
        &cfg.model_name,
        &draft.prompt_rendered,
        draft.max_tokens,
        cfg.temperature,
    );
    let mut run = draft;
    let started = Instant::now();
    let mut attempts = 0;
    let mut last_error = String::new();
    while attempts <= cfg.retries {
        attempts += 1;
        match backend.complete(&req) {
            Ok(reply) => {
                run.output_text = reply.content;
                run.finish_reason = map_finish(reply.finish_reason.as_deref());
                run.raw_response = Some(reply.raw);
                run.attempts = attempts;
                run.latency_ms = if backend.wall_clock() {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                };
                return Ok(run);
            }
            Err(BackendError::Malformed(m)) => return Err(Error::MalformedResponse(m)),
            Err(BackendError::Transport(e)) => {
                tracing::warn!(attempt = attempts, query_id = %run.query_id, error = %e, "generation attempt failed");
                last_error = e;
            }
        }
    }
    run.output_text = String::new();
    run.finish_reason = FinishReason::Error;
    run.attempts = attempts;
    run.raw_response = Some(serde_json::json!({ "error": last_error }));
    run.latency_ms = if backend.wall_clock() {
        started.elapsed().as_millis() as u64
    } else {
        0
    };
    Ok(run)
}

pub struct Templates {
    pub base: PromptTemplate,
    pub rag: PromptTemplate,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            base: PromptTemplate::base_fr(),
            rag: PromptTemplate::rag_fr(),
        }
    }
}

pub struct BatchPlan<'a> {
    pub configurations: &'a [Configuration],
    /// Keyed by model name.
    pub backends: &'a HashMap<String, (BackendConfig, Box<dyn Backend>)>,
    pub templates: &'a Templates,
    pub terms: &'a [String],
    /// Keyed by encoder name.
    pub contexts: &'a HashMap<String, Box<dyn ContextSource + 'a>>,
    pub k: usize,
    pub char_budget: Option<usize>,
    pub workers: usize,
    /// Stop after this many new runs.
    pub max_new_runs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub planned: usize,
    pub already_done: usize,
    pub completed: usize,
    pub failures: usize,
    pub failed_query_ids: Vec<String>,
}

struct Job<'a> {
    config: &'a Configuration,
    term: &'a str,
    query_id: String,
}

/// Query ids already present in a batch output file. A trailing partial
/// line left by an interrupted write is cut off.
pub fn completed_query_ids(path: &Path) -> Result<HashSet<String>> {
    let mut done = HashSet::new();
    if !path.exists() {
        return Ok(done);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut good_len = 0;
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        if !line.ends_with(b"\n") {
            break;
        }
        match serde_json::from_slice::<GenerationRun>(line) {
            Ok(run) => {
                done.insert(run.query_id);
                good_len += line.len();
            }
            Err(_) => break,
        }
    }
    if good_len < bytes.len() {
        tracing::warn!(path = %path.display(), "truncating partial trailing record");
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(good_len as u64).map_err(|e| Error::io(path, e))?;
    }
    Ok(done)
}

pub fn read_runs(path: &Path) -> Result<Vec<GenerationRun>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
                path: path.to_path_buf(),
                row: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

fn execute(plan: &BatchPlan<'_>, job: &Job<'_>) -> GenerationRun {
    let cfg = job.config;
    let mut draft = GenerationRun {
        query_id: job.query_id.clone(),
        config_id: cfg.id(),
        term: job.term.to_string(),
        mode: cfg.mode,
        backend_model: cfg.backend_model.clone(),
        encoder_name: cfg.encoder_name.clone(),
        max_tokens: cfg.max_tokens,
        prompt_rendered: String::new(),
        context_refs: Vec::new(),
        context_truncated: false,
        output_text: String::new(),
        finish_reason: FinishReason::Error,
        latency_ms: 0,
        attempts: 0,
        raw_response: None,
    };
    let fail = |mut run: GenerationRun, message: String| {
        tracing::warn!(query_id = %run.query_id, %message, "run failed");
        run.raw_response = Some(serde_json::json!({ "error": message }));
        run
    };

    let rendered = match cfg.mode {
        Mode::BaseSlm => render_prompt(&plan.templates.base, job.term, None, plan.char_budget),
        Mode::Rag => {
            let encoder = cfg.encoder_name.as_deref().unwrap_or_default();
            let Some(source) = plan.contexts.get(encoder) else {
                return fail(draft, format!("no index for encoder {encoder:?}"));
            };
            match source.retrieve(job.term, plan.k) {
                Ok(hits) => {
                    let texts: Vec<String> = hits.iter().map(|(_, t)| t.clone()).collect();
                    let r = render_prompt(
                        &plan.templates.rag,
                        job.term,
                        Some(&texts),
                        plan.char_budget,
                    );
                    if let Ok(r) = &r {
                        draft.context_refs = hits
                            .into_iter()
                            .take(r.context_used)
                            .map(|(id, _)| id)
                            .collect();
                    }
                    r
                }
                Err(e) => Err(e),
            }
        }
    };
    let rendered = match rendered {
        Ok(r) => r,
        Err(e) => return fail(draft, e.to_string()),
    };
    draft.prompt_rendered = rendered.text;
    draft.context_truncated = rendered.truncated;

    let Some((bcfg, backend)) = plan.backends.get(&cfg.backend_model) else {
        return fail(draft, format!("no backend {:?}", cfg.backend_model));
    };
    let fallback = draft.clone();
    match generate(bcfg, backend.as_ref(), draft) {
        Ok(run) => run,
        Err(e) => fail(fallback, e.to_string()),
    }
}

/// Runs every (configuration × term) pair not already present in `out_path`,
/// appending one JSON line per run. Jobs are spread over a worker pool and
/// written by a single writer in plan order, so output order does not depend
/// on scheduling. Failed runs are recorded and counted, never fatal.
pub fn run_batch(plan: &BatchPlan<'_>, out_path: &Path) -> Result<BatchSummary> {
    let done = completed_query_ids(out_path)?;
    let mut jobs = Vec::new();
    let mut seen = HashSet::new();
    let mut summary = BatchSummary::default();
    for config in plan.configurations {
        for term in plan.terms {
            let query_id = config.query_id(term);
            if !seen.insert(query_id.clone()) {
                continue;
            }
            summary.planned += 1;
            if done.contains(&query_id) {
                summary.already_done += 1;
                continue;
            }
            jobs.push(Job {
                config,
                term,
                query_id,
            });
        }
    }
    if let Some(limit) = plan.max_new_runs {
        jobs.truncate(limit);
    }

    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_path)
        .map_err(|e| Error::io(out_path, e))?;
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, GenerationRun)>();
    let workers = plan.workers.clamp(1, jobs.len().max(1));
    let jobs_ref = &jobs;

    let write_result: Result<()> = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs_ref.get(i) else { break };
                if tx.send((i, execute(plan, job))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, GenerationRun> = BTreeMap::new();
        let mut next_to_write = 0;
        for (i, run) in rx {
            pending.insert(i, run);
            while let Some(run) = pending.remove(&next_to_write) {
                let mut line = serde_json::to_string(&run)?;
                line.push('\n');
                file.write_all(line.as_bytes())
                    .and_then(|_| file.flush())
                    .map_err(|e| Error::io(out_path, e))?;
                if run.finish_reason == FinishReason::Error {
                    summary.failures += 1;
                    summary.failed_query_ids.push(run.query_id.clone());
                }
                summary.completed += 1;
                next_to_write += 1;
            }
        }
        Ok(())
    });
    write_result?;
    file.sync_all().map_err(|e| Error::io(out_path, e))?;
    Ok(summary)
}
