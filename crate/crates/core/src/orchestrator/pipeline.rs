//! Stage implementations. Each stage reads the artifacts of the stages it
//! requires from the output directory and writes its own there.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::campaign::{sample_campaign_with, CampaignSample};
use super::config::{LoadedConfig, WikiSource};
use super::manifest::{RunManifest, Stage, StageStatus};
use super::{read_jsonl, write_jsonl};
use crate::agreement::AnnotationRecord;
use crate::annotate::{campaign_stats, load_journal_records};
use crate::corpus::{
    build_kb, chunk_kb, load_dataset, paraphrase_length_stats, split_by_term, write_kb_jsonl,
    write_misses, Chunk, DatasetFormat, HttpWikiClient, KbDocument, LengthStats, ParaphraseRecord,
    RecordedWikiClient, Split, WikiClient,
};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::generator::{
    read_runs, run_batch, Backend, BackendConfig, BatchPlan, Configuration, ContextSource,
    FinishReason, IndexedContext, Mode, PromptTemplate, Templates,
};
use crate::metrics::{
    correlate, format_report, ragrefs, tokenize, ExternalScorer, MetricReport, QueryScore, Scorer,
};
use crate::retriever::{self, VectorIndex};

pub const DATASET: &str = "dataset.jsonl";
pub const DATASET_STATS: &str = "dataset_stats.json";
pub const SPLIT_SUMMARY: &str = "split/summary.json";
pub const KB: &str = "kb/kb.jsonl";
pub const KB_MISSES: &str = "kb/misses.txt";
pub const KB_FAILURES: &str = "kb/failures.jsonl";
pub const KB_SUMMARY: &str = "kb/summary.json";
pub const CHUNKS: &str = "kb/chunks.jsonl";
pub const CONFIGURATIONS: &str = "configurations.json";
pub const RUNS: &str = "runs.jsonl";
pub const RUN_SUMMARY: &str = "run_summary.json";
pub const SCORES: &str = "scores.jsonl";
pub const METRIC_REPORTS: &str = "metric_reports.jsonl";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const CORRELATION_CSV: &str = "correlation.csv";
pub const CAMPAIGN: &str = "campaign.jsonl";
pub const AGREEMENT_TXT: &str = "agreement.txt";
pub const AGREEMENT_CSV: &str = "agreement.csv";
pub const STATS: &str = "stats.json";

pub fn split_file(split: Split) -> String {
    let name = match split {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
        Split::Unassigned => "unassigned",
    };
    format!("split/{name}.jsonl")
}

pub fn index_file(encoder: &str) -> String {
    let safe: String = encoder
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("index/{safe}.idx")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    /// Already done; nothing ran.
    Skipped,
    Done,
    /// Ran but left work for a later invocation.
    Partial,
}

struct StageResult {
    artifacts: Vec<PathBuf>,
    message: Option<String>,
    partial: bool,
}

impl StageResult {
    fn done(artifacts: &[&str]) -> Self {
        StageResult {
            artifacts: artifacts.iter().map(PathBuf::from).collect(),
            message: None,
            partial: false,
        }
    }

    fn with_message(mut self, m: String) -> Self {
        self.message = Some(m);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub rows_read: usize,
    pub duplicates_dropped: usize,
    pub terms: usize,
    pub pairs: usize,
    pub lengths: LengthStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub seed: u64,
    pub ratios: [f64; 3],
    /// Train, validation, test.
    pub terms: [usize; 3],
    pub pairs: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbSummary {
    pub terms: usize,
    pub documents: usize,
    pub lines: usize,
    pub chunks: usize,
    pub tokens: usize,
    pub misses: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub config_id: String,
    #[serde(flatten)]
    pub score: QueryScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FailureLine {
    term: String,
    error: String,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub struct Pipeline {
    cfg: LoadedConfig,
    out: PathBuf,
    manifest: RunManifest,
    force: bool,
}

impl Pipeline {
    pub fn open(cfg: LoadedConfig, force: bool) -> Result<Self> {
        let out = cfg.output_dir();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let manifest = RunManifest::load_or_new(&out, &cfg.config.hash())?;
        Ok(Pipeline {
            cfg,
            out,
            manifest,
            force,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn config(&self) -> &LoadedConfig {
        &self.cfg
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn require(&self, stage: Stage) -> Result<()> {
        if self.manifest.status(stage) != StageStatus::Done {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} has not completed; run it first"
            )));
        }
        Ok(())
    }

    fn stage(
        &mut self,
        stage: Stage,
        body: impl FnOnce(&Self) -> Result<StageResult>,
    ) -> Result<StageOutcome> {
        if self.manifest.status(stage) == StageStatus::Done && !self.force {
            tracing::info!(
                "stage {stage} already done; nothing to do (use --stage-force to rerun)"
            );
            return Ok(StageOutcome::Skipped);
        }
        for &r in stage.requires() {
            self.require(r)?;
        }
        self.manifest.begin(stage);
        self.manifest.save(&self.out)?;
        tracing::info!("stage {stage} started");
        match body(self) {
            Ok(res) => {
                let outcome = if res.partial {
                    self.manifest.pause(
                        stage,
                        res.artifacts,
                        res.message.unwrap_or_else(|| "partial".into()),
                    );
                    StageOutcome::Partial
                } else {
                    self.manifest.finish(stage, res.artifacts, res.message);
                    StageOutcome::Done
                };
                self.manifest.save(&self.out)?;
                tracing::info!("stage {stage} finished");
                Ok(outcome)
            }
            Err(e) => {
                self.manifest.fail(stage, e.to_string());
                self.manifest.save(&self.out)?;
                Err(e)
            }
        }
    }

    /// Records of the evaluation split, truncated to `max_terms`.
    pub fn eval_records(&self) -> Result<Vec<ParaphraseRecord>> {
        let mut records: Vec<ParaphraseRecord> =
            read_jsonl(&self.path(&split_file(self.cfg.config.dataset.eval_split)))?;
        if let Some(n) = self.cfg.config.dataset.max_terms {
            records.truncate(n);
        }
        Ok(records)
    }

    fn eval_terms(&self) -> Result<Vec<String>> {
        Ok(self.eval_records()?.into_iter().map(|r| r.term).collect())
    }

    pub fn ingest(&mut self) -> Result<StageOutcome> {
        self.stage(Stage::Ingest, |p| {
            let ds = &p.cfg.config.dataset;
            let path = p.cfg.resolve(&ds.path);
            let format = ds.format.unwrap_or_else(|| DatasetFormat::from_path(&path));
            let loaded = load_dataset(&path, format)?;
            let stats = DatasetStats {
                rows_read: loaded.rows_read,
                duplicates_dropped: loaded.duplicates_dropped,
                terms: loaded.records.len(),
                pairs: loaded.pair_count(),
                lengths: paraphrase_length_stats(&loaded.records)?,
            };
            write_jsonl(&p.path(DATASET), &loaded.records)?;
            write_json(&p.path(DATASET_STATS), &stats)?;
            Ok(StageResult::done(&[DATASET, DATASET_STATS])
                .with_message(format!("{} terms, {} pairs", stats.terms, stats.pairs)))
        })
    }

    pub fn split(&mut self) -> Result<StageOutcome> {
        self.stage(Stage::Split, |p| {
            let records: Vec<ParaphraseRecord> = read_jsonl(&p.path(DATASET))?;
            let c = &p.cfg.config;
            let split = split_by_term(&records, c.ratios()?, c.seed)?;
            let mut artifacts = Vec::new();
            for s in [Split::Train, Split::Validation, Split::Test] {
                let rel = split_file(s);
                write_jsonl(&p.path(&rel), split.get(s))?;
                artifacts.push(PathBuf::from(rel));
            }
            let summary = SplitSummary {
                seed: c.seed,
                ratios: c.dataset.ratios,
                terms: [split.train.len(), split.validation.len(), split.test.len()],
                pairs: split.pair_counts(),
            };
            write_json(&p.path(SPLIT_SUMMARY), &summary)?;
            artifacts.push(SPLIT_SUMMARY.into());
            Ok(StageResult {
                artifacts,
                message: Some(format!("pairs {:?}", summary.pairs)),
                partial: false,
            })
        })
    }

    fn wiki_client(&self) -> Result<Box<dyn WikiClient>> {
        Ok(match &self.cfg.config.kb.source {
            WikiSource::Recorded { bundle } => {
                Box::new(RecordedWikiClient::open(&self.cfg.resolve(bundle))?)
            }
            WikiSource::Http(h) => {
                let mut h = h.clone();
                h.cache_dir = h.cache_dir.map(|d| self.cfg.resolve(&d));
                Box::new(HttpWikiClient::new(h))
            }
        })
    }

    /// Builds the knowledge base for the evaluation terms, chunks it and
    /// indexes the chunks once per encoder.
    pub fn index(&mut self) -> Result<StageOutcome> {
        self.stage(Stage::Index, |p| {
            let kb = &p.cfg.config.kb;
            let terms = p.eval_terms()?;
            let client = p.wiki_client()?;
            let build = build_kb(&terms, client.as_ref(), &kb.params())?;
            let kb_dir = p.path(KB);
            let kb_dir = kb_dir.parent().expect("kb dir");
            fs::create_dir_all(kb_dir).map_err(|e| Error::io(kb_dir, e))?;
            write_kb_jsonl(&p.path(KB), &build.documents)?;
            write_misses(&p.path(KB_MISSES), &build.misses)?;
            let failures: Vec<FailureLine> = build
                .failures
                .iter()
                .map(|(term, error)| FailureLine {
                    term: term.clone(),
                    error: error.clone(),
                })
                .collect();
            write_jsonl(&p.path(KB_FAILURES), &failures)?;

            let chunks = chunk_kb(&build.documents, kb.granularity, kb.chunk_tokens)?;
            write_jsonl(&p.path(CHUNKS), &chunks)?;
            let summary = KbSummary {
                terms: terms.len(),
                documents: build.documents.len(),
                lines: build.line_count(),
                chunks: chunks.len(),
                tokens: chunks.iter().map(|c| tokenize(&c.text).len()).sum(),
                misses: build.misses.len(),
                failures: build.failures.len(),
            };
            write_json(&p.path(KB_SUMMARY), &summary)?;
            let mut artifacts: Vec<PathBuf> = [KB, KB_MISSES, KB_FAILURES, CHUNKS, KB_SUMMARY]
                .into_iter()
                .map(PathBuf::from)
                .collect();

            if !p.cfg.config.encoders.is_empty() {
                if chunks.is_empty() {
                    return Err(Error::InvalidArgument(
                        "knowledge base is empty; nothing to index".into(),
                    ));
                }
                for enc in &p.cfg.config.encoders {
                    let embedder = p.build_embedder(enc)?;
                    let index = retriever::build_index(&chunks, embedder.as_ref())?;
                    let rel = index_file(&enc.model_name);
                    let path = p.path(&rel);
                    fs::create_dir_all(path.parent().expect("index dir"))
                        .map_err(|e| Error::io(&path, e))?;
                    index.save(&path)?;
                    artifacts.push(rel.into());
                }
            }
            Ok(StageResult {
                artifacts,
                message: Some(format!(
                    "{} documents, {} chunks, {} misses, {} failures",
                    summary.documents, summary.chunks, summary.misses, summary.failures
                )),
                partial: false,
            })
        })
    }

    fn build_embedder(&self, enc: &crate::embed::EmbedderConfig) -> Result<Box<dyn Embedder>> {
        let mut enc = enc.clone();
        enc.record_path = enc.record_path.map(|r| self.cfg.resolve(&r));
        enc.build()
    }

    fn encoder(&self, name: &str) -> Result<Box<dyn Embedder>> {
        let enc = self
            .cfg
            .config
            .encoders
            .iter()
            .find(|e| e.model_name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no encoder named {name:?}")))?;
        self.build_embedder(enc)
    }

    pub fn load_index(&self, encoder: &str) -> Result<VectorIndex> {
        VectorIndex::load(&self.path(&index_file(encoder)))
    }

    pub fn load_chunks(&self) -> Result<Vec<Chunk>> {
        read_jsonl(&self.path(CHUNKS))
    }

    /// Top-`k` chunks for `text` from one encoder's index.
    pub fn query_index(
        &self,
        encoder: &str,
        text: &str,
        k: usize,
    ) -> Result<Vec<(String, f64, String)>> {
        self.require(Stage::Index)?;
        let index = self.load_index(encoder)?;
        let embedder = self.encoder(encoder)?;
        let texts: HashMap<String, String> = self
            .load_chunks()?
            .into_iter()
            .map(|c| (c.id, c.text))
            .collect();
        let ctx = retriever::query(&index, text, k, embedder.as_ref())?;
        Ok(ctx
            .hits
            .into_iter()
            .map(|h| {
                let t = texts.get(&h.chunk_ref).cloned().unwrap_or_default();
                (h.chunk_ref, h.score, t)
            })
            .collect())
    }

    fn templates(&self) -> Result<Templates> {
        let g = &self.cfg.config.generation;
        let mut t = Templates::default();
        if let Some(p) = &g.base_template {
            t.base = PromptTemplate::from_file(Mode::BaseSlm, "fr", &self.cfg.resolve(p))?;
        }
        if let Some(p) = &g.rag_template {
            t.rag = PromptTemplate::from_file(Mode::Rag, "fr", &self.cfg.resolve(p))?;
        }
        Ok(t)
    }

    pub fn configurations(&self) -> Vec<Configuration> {
        self.cfg.config.configurations()
    }

    pub fn run(&mut self, max_new_runs: Option<usize>) -> Result<StageOutcome> {
        self.stage(Stage::Run, |p| {
            let c = &p.cfg.config;
            let configurations = p.configurations();
            tracing::info!("{} configurations:", configurations.len());
            for cfg in &configurations {
                tracing::info!("  {}", cfg.id());
            }
            write_json(&p.path(CONFIGURATIONS), &configurations)?;

            let terms = p.eval_terms()?;
            let mut backends: HashMap<String, (BackendConfig, Box<dyn Backend>)> = HashMap::new();
            for b in &c.backends {
                backends.insert(b.model_name.clone(), (b.clone(), b.build()?));
            }

            let needs_rag = configurations.iter().any(|x| x.mode == Mode::Rag);
            let mut indexes: Vec<(String, VectorIndex, Box<dyn Embedder>)> = Vec::new();
            let mut texts: HashMap<String, String> = HashMap::new();
            if needs_rag {
                p.require(Stage::Index)?;
                texts = p
                    .load_chunks()?
                    .into_iter()
                    .map(|ch| (ch.id, ch.text))
                    .collect();
                for enc in &c.encoders {
                    indexes.push((
                        enc.model_name.clone(),
                        p.load_index(&enc.model_name)?,
                        p.build_embedder(enc)?,
                    ));
                }
            }
            let contexts: HashMap<String, Box<dyn ContextSource + '_>> = indexes
                .iter()
                .map(|(name, index, embedder)| {
                    let src: Box<dyn ContextSource + '_> = Box::new(IndexedContext {
                        index,
                        embedder: embedder.as_ref(),
                        texts: texts.clone(),
                    });
                    (name.clone(), src)
                })
                .collect();
            let templates = p.templates()?;
            let plan = BatchPlan {
                configurations: &configurations,
                backends: &backends,
                templates: &templates,
                terms: &terms,
                contexts: &contexts,
                k: c.generation.k,
                char_budget: c.generation.char_budget,
                workers: c.generation.workers,
                max_new_runs,
            };
            let runs_path = p.path(RUNS);
            if p.force && runs_path.exists() {
                fs::remove_file(&runs_path).map_err(|e| Error::io(&runs_path, e))?;
            }
            let summary = run_batch(&plan, &runs_path)?;
            write_json(&p.path(RUN_SUMMARY), &summary)?;
            let remaining = summary.planned - summary.already_done - summary.completed;
            Ok(StageResult {
                artifacts: [CONFIGURATIONS, RUNS, RUN_SUMMARY]
                    .into_iter()
                    .map(PathBuf::from)
                    .collect(),
                message: Some(format!(
                    "{} runs planned, {} written, {} failed, {} remaining",
                    summary.planned, summary.completed, summary.failures, remaining
                )),
                partial: remaining > 0,
            })
        })
    }

    pub fn eval(&mut self) -> Result<StageOutcome> {
        self.stage(Stage::Eval, |p| {
            let c = &p.cfg.config;
            let runs = read_runs(&p.path(RUNS))?;
            let records = p.eval_records()?;
            let order: Vec<String> = p.configurations().iter().map(Configuration::id).collect();
            let mut grouped: BTreeMap<String, Vec<_>> = BTreeMap::new();
            let mut failed = 0;
            for r in runs {
                if r.finish_reason == FinishReason::Error {
                    failed += 1;
                    continue;
                }
                grouped.entry(r.config_id.clone()).or_default().push(r);
            }
            let mut ids: Vec<String> = order.into_iter().filter(|id| grouped.contains_key(id)).collect();
            ids.extend(grouped.keys().filter(|k| !ids.contains(k)).cloned().collect::<Vec<_>>());

            let embedder = match &c.eval.embedder {
                Some(name) => Some(p.encoder(name)?),
                None => None,
            };
            let external = c
                .eval
                .external_scorer
                .as_ref()
                .map(|x| ExternalScorer::new(&x.url, x.timeout_ms, x.retries));
            let scorer = Scorer {
                metrics: c.eval.metrics.clone(),
                embedder: embedder.as_deref(),
                external: external.as_ref(),
                rouge: c.eval.rouge,
            };
            let mut lines = Vec::new();
            let mut reports = Vec::new();
            let mut excluded = 0;
            for id in &ids {
                let out = ragrefs(id, &grouped[id], &records, &scorer)?;
                excluded += out.excluded.len();
                lines.extend(out.scores.into_iter().map(|score| ScoreLine {
                    config_id: id.clone(),
                    score,
                }));
                reports.push(out.report);
            }
            if reports.is_empty() {
                return Err(Error::InvalidArgument("no successful runs to evaluate".into()));
            }
            write_jsonl(&p.path(SCORES), &lines)?;
            write_jsonl(&p.path(METRIC_REPORTS), &reports)?;
            Ok(StageResult::done(&[SCORES, METRIC_REPORTS]).with_message(format!(
                "{} configurations, {} scored queries, {failed} failed runs skipped, {excluded} without references",
                reports.len(),
                lines.len()
            )))
        })
    }

    pub fn report(&mut self) -> Result<StageOutcome> {
        self.stage(Stage::Report, |p| {
            let reports: Vec<MetricReport> = read_jsonl(&p.path(METRIC_REPORTS))?;
            let rendered = format_report(&reports);
            write_text(&p.path(REPORT_TXT), &rendered.text)?;
            write_text(&p.path(REPORT_CSV), &rendered.csv)?;
            let mut artifacts = vec![PathBuf::from(REPORT_TXT), PathBuf::from(REPORT_CSV)];
            if p.manifest.status(Stage::Agree) == StageStatus::Done {
                let stats: crate::annotate::CampaignStats = read_json(&p.path(STATS))?;
                match correlate(&reports, &stats.manual) {
                    Ok(m) => {
                        let mut csv = String::from("metric,criterion,pearson,constant\n");
                        for cell in &m.cells {
                            csv.push_str(&format!(
                                "{},{},{:.6},{}\n",
                                cell.metric,
                                cell.criterion.name(),
                                cell.pearson,
                                cell.constant
                            ));
                        }
                        write_text(&p.path(CORRELATION_CSV), &csv)?;
                        artifacts.push(CORRELATION_CSV.into());
                    }
                    Err(e) => tracing::warn!("correlation skipped: {e}"),
                }
            }
            Ok(StageResult {
                artifacts,
                message: None,
                partial: false,
            })
        })
    }

    fn block_label(cfg: &Configuration) -> String {
        format!(
            "{}tok-{}",
            cfg.max_tokens,
            if cfg.fine_tuned { "ft" } else { "base" }
        )
    }

    pub fn campaign(&mut self) -> Result<StageOutcome> {
        self.stage(Stage::Campaign, |p| {
            let c = &p.cfg.config;
            let runs = read_runs(&p.path(RUNS))?;
            let templates = p.templates()?;
            let sampling =
                sample_campaign_with(&runs, c.campaign.per_config, c.seed, &templates.base)?;
            let labels: HashMap<String, String> = p
                .configurations()
                .iter()
                .map(|x| (x.id(), Self::block_label(x)))
                .collect();
            let samples: Vec<CampaignSample> = sampling
                .samples
                .into_iter()
                .map(|mut s| {
                    if let Some(l) = labels.get(&s.config_id) {
                        s.block = l.clone();
                    }
                    s
                })
                .collect();
            write_jsonl(&p.path(CAMPAIGN), &samples)?;
            let mut msg = format!("{} samples", samples.len());
            if !sampling.warnings.is_empty() {
                msg.push_str(&format!("; {}", sampling.warnings.join("; ")));
            }
            Ok(StageResult::done(&[CAMPAIGN]).with_message(msg))
        })
    }

    pub fn journal_path(&self) -> PathBuf {
        self.out.join(&self.cfg.config.campaign.journal)
    }

    /// Agreement statistics over `annotations` (a JSONL export), or over the
    /// service journal when none is given.
    pub fn agree(&mut self, annotations: Option<&Path>) -> Result<StageOutcome> {
        self.stage(Stage::Agree, |p| {
            let samples: Vec<CampaignSample> = read_jsonl(&p.path(CAMPAIGN))?;
            let records: Vec<AnnotationRecord> = match annotations {
                Some(path) => read_jsonl(path)?,
                None => load_journal_records(&p.journal_path())?,
            };
            let stats = campaign_stats(&samples, &records)?;
            write_text(&p.path(AGREEMENT_TXT), &stats.text)?;
            write_text(&p.path(AGREEMENT_CSV), &stats.csv)?;
            write_json(&p.path(STATS), &stats)?;
            Ok(StageResult::done(&[AGREEMENT_TXT, AGREEMENT_CSV, STATS])
                .with_message(format!("{} annotation records", records.len())))
        })
    }

    pub fn campaign_samples(&self) -> Result<Vec<CampaignSample>> {
        self.require(Stage::Campaign)?;
        read_jsonl(&self.path(CAMPAIGN))
    }

    pub fn kb_documents(&self) -> Result<Vec<KbDocument>> {
        crate::corpus::read_kb_jsonl(&self.path(KB))
    }
}
