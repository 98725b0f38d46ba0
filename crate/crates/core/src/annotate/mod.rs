//! Human-evaluation campaign service: per-annotator queues, a durable
//! append-only journal, and live agreement statistics.

mod server;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::agreement::{
    aggregate_manual, agreement_reports, render_agreement, AgreementReport, AnnotationRecord,
    ManualCriterion, ManualSummary,
};
use crate::error::{Error, Result};
use crate::orchestrator::{AnnotatorConfig, CampaignSample};

pub use server::{router, serve};

/// JSON Schema of an annotation submission, shared with the browser client.
pub const SCHEMA: &str = include_str!("../../schema/annotation.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub n_records: usize,
    pub agreement: Vec<AgreementReport>,
    pub manual: Vec<ManualSummary>,
    pub text: String,
    pub csv: String,
}

fn sorted(records: &[AnnotationRecord]) -> Vec<AnnotationRecord> {
    let mut v = records.to_vec();
    v.sort_by(|a, b| {
        (a.sample_id.as_str(), a.annotator_id.as_str())
            .cmp(&(b.sample_id.as_str(), b.annotator_id.as_str()))
    });
    v
}

/// Agreement per block plus per-configuration manual summaries. Used by both
/// the service and the `agree` command, so their outputs coincide.
pub fn campaign_stats(
    samples: &[CampaignSample],
    records: &[AnnotationRecord],
) -> Result<CampaignStats> {
    let records = sorted(records);
    let blocks: BTreeMap<String, String> = samples
        .iter()
        .map(|s| (s.sample_id.clone(), s.block.clone()))
        .collect();
    let configs: HashMap<String, String> = samples
        .iter()
        .map(|s| (s.sample_id.clone(), s.config_id.clone()))
        .collect();
    let agreement = agreement_reports(&records, &blocks);
    let manual = aggregate_manual(&records, &configs)?;
    let (mut text, csv) = render_agreement(&agreement);
    if !manual.is_empty() {
        text.push_str("\n[manual]\n");
        text.push_str(&format!("{:<40}{:>6}", "config", "n"));
        for c in ManualCriterion::ALL {
            text.push_str(&format!("{:>22}", c.name()));
        }
        text.push('\n');
        for m in &manual {
            text.push_str(&format!("{:<40}{:>6}", m.config_id, m.n_items));
            for c in ManualCriterion::ALL {
                let decimals = if c == ManualCriterion::Readability {
                    2
                } else {
                    0
                };
                text.push_str(&format!(
                    "{:>22}",
                    crate::metrics::round_half_away(m.value(c), decimals)
                ));
            }
            text.push('\n');
        }
    }
    Ok(CampaignStats {
        n_records: records.len(),
        agreement,
        manual,
        text,
        csv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub received_at: DateTime<Utc>,
    pub record: AnnotationRecord,
}

/// Reads a journal, cutting off a torn trailing line (never acknowledged).
fn replay(path: &Path) -> Result<Vec<JournalEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut good = 0;
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        if !line.ends_with(b"\n") {
            break;
        }
        if line.iter().all(u8::is_ascii_whitespace) {
            good += line.len();
            continue;
        }
        match serde_json::from_slice::<JournalEntry>(line) {
            Ok(e) => {
                entries.push(e);
                good += line.len();
            }
            Err(e) => {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    row: entries.len() + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    if good < bytes.len() {
        tracing::warn!(path = %path.display(), "dropping torn journal tail");
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(good as u64).map_err(|e| Error::io(path, e))?;
    }
    Ok(entries)
}

fn effective(entries: &[JournalEntry]) -> BTreeMap<(String, String), AnnotationRecord> {
    let mut out = BTreeMap::new();
    for e in entries {
        out.insert(
            (e.record.sample_id.clone(), e.record.annotator_id.clone()),
            e.record.clone(),
        );
    }
    out
}

/// Current annotations in a journal: the latest submission per
/// (sample, annotator), sorted. A missing journal has none.
pub fn load_journal_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    Ok(effective(&replay(path)?).into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApiError {
    UnknownAnnotator,
    UnassignedSample(String),
    InvalidField { field: String, message: String },
    Internal(String),
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ApiError::UnknownAnnotator => write!(f, "unknown annotator"),
            ApiError::UnassignedSample(s) => {
                write!(f, "sample {s} is not assigned to this annotator")
            }
            ApiError::InvalidField { field, message } => write!(f, "{field}: {message}"),
            ApiError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

/// What an annotator sees of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleView {
    pub sample_id: String,
    pub term: String,
    pub prompt: String,
    pub output_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotated: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextResponse {
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleView>,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub sample_id: String,
    pub annotator_id: String,
    /// Submissions so far for this (sample, annotator), this one included.
    pub revision: usize,
}

pub struct ServiceConfig {
    pub samples: Vec<CampaignSample>,
    pub annotators: Vec<AnnotatorConfig>,
    pub journal: PathBuf,
}

struct Campaign {
    samples: Vec<CampaignSample>,
    by_id: HashMap<String, usize>,
    tokens: HashMap<String, String>,
    queues: HashMap<String, Vec<usize>>,
    assigned: HashMap<String, HashSet<String>>,
}

#[derive(Clone, Default)]
struct View {
    entries: Vec<JournalEntry>,
    current: BTreeMap<(String, String), AnnotationRecord>,
    revisions: HashMap<(String, String), usize>,
}

impl View {
    fn apply(&mut self, e: JournalEntry) {
        let key = (e.record.sample_id.clone(), e.record.annotator_id.clone());
        *self.revisions.entry(key.clone()).or_insert(0) += 1;
        self.current.insert(key, e.record.clone());
        self.entries.push(e);
    }
}

struct Writer {
    file: File,
    path: PathBuf,
    next_seq: u64,
}

/// Campaign state. Readers work on an immutable snapshot; each accepted
/// submission is appended and synced to the journal by a single writer, then
/// published as a new snapshot.
pub struct Service {
    campaign: Campaign,
    view: RwLock<Arc<View>>,
    writer: Mutex<Writer>,
}

const CRITERIA: [(&str, std::ops::RangeInclusive<i64>); 5] = [
    ("readability", 1..=3),
    ("completeness_strict", 0..=1),
    ("completeness_relaxed", 0..=1),
    ("correctness_strict", 0..=1),
    ("correctness_relaxed", 0..=1),
];

fn field_error(field: &str, message: impl Into<String>) -> ApiError {
    ApiError::InvalidField {
        field: field.to_string(),
        message: message.into(),
    }
}

impl Service {
    pub fn open(cfg: ServiceConfig) -> Result<Self> {
        if cfg.samples.is_empty() {
            return Err(Error::InvalidArgument("campaign has no samples".into()));
        }
        let by_id: HashMap<String, usize> = cfg
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.sample_id.clone(), i))
            .collect();
        if by_id.len() != cfg.samples.len() {
            return Err(Error::InvalidArgument(
                "duplicate sample ids in campaign".into(),
            ));
        }
        let mut tokens = HashMap::new();
        let mut queues = HashMap::new();
        let mut assigned = HashMap::new();
        for a in &cfg.annotators {
            tokens.insert(a.token.clone(), a.id.clone());
            let mut q: Vec<usize> = cfg
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| a.only_budget.is_none_or(|b| s.max_tokens == b))
                .map(|(i, _)| i)
                .collect();
            if let Some(n) = a.limit {
                q.truncate(n);
            }
            assigned.insert(
                a.id.clone(),
                q.iter()
                    .map(|&i| cfg.samples[i].sample_id.clone())
                    .collect(),
            );
            queues.insert(a.id.clone(), q);
        }
        let campaign = Campaign {
            samples: cfg.samples,
            by_id,
            tokens,
            queues,
            assigned,
        };

        let mut view = View::default();
        for e in replay(&cfg.journal)? {
            if !campaign.by_id.contains_key(&e.record.sample_id) {
                tracing::warn!(sample = %e.record.sample_id, "journal entry for a sample outside the campaign; ignored");
                continue;
            }
            view.apply(e);
        }
        let next_seq = view.entries.iter().map(|e| e.seq + 1).max().unwrap_or(0);
        if let Some(parent) = cfg.journal.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&cfg.journal)
            .map_err(|e| Error::io(&cfg.journal, e))?;
        Ok(Service {
            campaign,
            view: RwLock::new(Arc::new(view)),
            writer: Mutex::new(Writer {
                file,
                path: cfg.journal,
                next_seq,
            }),
        })
    }

    fn snapshot(&self) -> Arc<View> {
        self.view.read().expect("view lock").clone()
    }

    fn annotator(&self, token: &str) -> std::result::Result<&str, ApiError> {
        self.campaign
            .tokens
            .get(token)
            .map(String::as_str)
            .ok_or(ApiError::UnknownAnnotator)
    }

    pub fn next_sample(&self, token: &str) -> std::result::Result<NextResponse, ApiError> {
        let annotator = self.annotator(token)?;
        let queue = &self.campaign.queues[annotator];
        let view = self.snapshot();
        let is_done = |i: &usize| {
            view.current.contains_key(&(
                self.campaign.samples[*i].sample_id.clone(),
                annotator.to_string(),
            ))
        };
        let annotated = queue.iter().filter(|i| is_done(i)).count();
        let sample = queue.iter().find(|i| !is_done(i)).map(|&i| {
            let s = &self.campaign.samples[i];
            SampleView {
                sample_id: s.sample_id.clone(),
                term: s.term.clone(),
                prompt: s.prompt_shown.clone(),
                output_text: s.output_text.clone(),
            }
        });
        Ok(NextResponse {
            done: sample.is_none(),
            sample,
            progress: Progress {
                annotated,
                total: queue.len(),
            },
        })
    }

    /// Validates a submission body, naming the first offending field.
    pub fn parse_submission(
        &self,
        body: &serde_json::Value,
    ) -> std::result::Result<AnnotationRecord, ApiError> {
        let obj = body
            .as_object()
            .ok_or_else(|| field_error("body", "expected a JSON object"))?;
        let known: HashSet<&str> = ["annotator", "sample_id"]
            .into_iter()
            .chain(CRITERIA.iter().map(|(n, _)| *n))
            .collect();
        if let Some(extra) = obj.keys().find(|k| !known.contains(k.as_str())) {
            return Err(field_error(extra, "unknown field"));
        }
        let text = |name: &str| -> std::result::Result<String, ApiError> {
            match obj.get(name) {
                Some(serde_json::Value::String(s)) if !s.is_empty() => Ok(s.clone()),
                Some(_) => Err(field_error(name, "must be a non-empty string")),
                None => Err(field_error(name, "missing")),
            }
        };
        let token = text("annotator")?;
        let annotator = self.annotator(&token)?.to_string();
        let sample_id = text("sample_id")?;
        let mut values = [0u8; 5];
        for (slot, (name, range)) in values.iter_mut().zip(CRITERIA.iter()) {
            let v = obj
                .get(*name)
                .ok_or_else(|| field_error(name, "missing"))?
                .as_i64()
                .ok_or_else(|| field_error(name, "must be an integer"))?;
            if !range.contains(&v) {
                return Err(field_error(
                    name,
                    format!("{v} is outside {}..={}", range.start(), range.end()),
                ));
            }
            *slot = v as u8;
        }
        if !self.campaign.assigned[&annotator].contains(&sample_id) {
            return Err(ApiError::UnassignedSample(sample_id));
        }
        let record = AnnotationRecord {
            sample_id,
            annotator_id: annotator,
            readability: values[0],
            completeness_strict: values[1],
            completeness_relaxed: values[2],
            correctness_strict: values[3],
            correctness_relaxed: values[4],
        };
        record
            .validate()
            .map_err(|f| field_error(&f, "out of domain"))?;
        Ok(record)
    }

    /// Persists a submission; returns once it is on disk.
    pub fn submit(&self, body: &serde_json::Value) -> std::result::Result<Ack, ApiError> {
        let record = self.parse_submission(body)?;
        let mut w = self.writer.lock().expect("writer lock");
        let entry = JournalEntry {
            seq: w.next_seq,
            received_at: Utc::now(),
            record,
        };
        let mut line =
            serde_json::to_string(&entry).map_err(|e| ApiError::Internal(e.to_string()))?;
        line.push('\n');
        w.file
            .write_all(line.as_bytes())
            .and_then(|_| w.file.sync_data())
            .map_err(|e| ApiError::Internal(format!("{}: {e}", w.path.display())))?;
        w.next_seq += 1;

        let key = (
            entry.record.sample_id.clone(),
            entry.record.annotator_id.clone(),
        );
        let mut next = (*self.snapshot()).clone();
        next.apply(entry);
        let revision = next.revisions[&key];
        *self.view.write().expect("view lock") = Arc::new(next);
        Ok(Ack {
            sample_id: key.0,
            annotator_id: key.1,
            revision,
        })
    }

    /// Current annotations, one per (sample, annotator), sorted.
    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.snapshot().current.values().cloned().collect()
    }

    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn stats(&self) -> Result<CampaignStats> {
        campaign_stats(&self.campaign.samples, &self.records())
    }

    /// Every submission for one (sample, annotator), oldest first.
    pub fn audit_trail(&self, sample_id: &str, annotator_id: &str) -> Vec<JournalEntry> {
        self.snapshot()
            .entries
            .iter()
            .filter(|e| e.record.sample_id == sample_id && e.record.annotator_id == annotator_id)
            .cloned()
            .collect()
    }
}
