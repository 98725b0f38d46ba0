//! Command-line workflow: configuration, run manifest, stages and the
//! annotation campaign sampler.

mod campaign;
pub mod cli;
mod config;
mod manifest;
mod pipeline;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use campaign::{
    read_campaign, sample_campaign, sample_campaign_with, CampaignSample, CampaignSampling,
};
pub use config::{
    AnnotatorConfig, CampaignSection, DatasetSection, EvalSection, ExternalScorerConfig,
    GenerationSection, KbSection, LoadedConfig, RunConfig, WikiSource,
};
pub use manifest::{RunManifest, Stage, StageRecord, StageStatus, MANIFEST_FILE};
pub use pipeline::{
    index_file, split_file, DatasetStats, KbSummary, Pipeline, ScoreLine, SplitSummary,
    StageOutcome,
};

/// Pipeline artifact names, relative to the output directory.
pub mod artifacts {
    pub use super::pipeline::{
        AGREEMENT_CSV, AGREEMENT_TXT, CAMPAIGN, CHUNKS, CONFIGURATIONS, CORRELATION_CSV, DATASET,
        DATASET_STATS, KB, KB_FAILURES, KB_MISSES, KB_SUMMARY, METRIC_REPORTS, REPORT_CSV,
        REPORT_TXT, RUNS, RUN_SUMMARY, SCORES, SPLIT_SUMMARY, STATS,
    };
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
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
