//! Per-output-directory record of which stages ran, under which config hash,
//! and what they wrote.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Split,
    Index,
    Run,
    Eval,
    Report,
    Campaign,
    Agree,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Split,
        Stage::Index,
        Stage::Run,
        Stage::Eval,
        Stage::Report,
        Stage::Campaign,
        Stage::Agree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Index => "index",
            Stage::Run => "run",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::Campaign => "campaign",
            Stage::Agree => "agree",
        }
    }

    /// Stages that must be done first.
    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Split => &[Stage::Ingest],
            Stage::Index => &[Stage::Split],
            Stage::Run => &[Stage::Split],
            Stage::Eval => &[Stage::Run],
            Stage::Report => &[Stage::Eval],
            Stage::Campaign => &[Stage::Run],
            Stage::Agree => &[Stage::Campaign],
        }
    }

    /// Stages whose output goes stale when this one re-runs.
    pub fn dependents(self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        for s in Stage::ALL {
            if s.requires().iter().any(|r| *r == self || out.contains(r)) {
                out.push(s);
            }
        }
        out
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    #[default]
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Paths relative to the output directory.
    #[serde(default)]
    pub artifacts: Vec<PathBuf>,
    #[serde(default)]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub created_at: DateTime<Utc>,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        RunManifest {
            config_hash: config_hash.to_string(),
            created_at: Utc::now(),
            stages: Stage::ALL
                .into_iter()
                .map(|s| (s, StageRecord::default()))
                .collect(),
        }
    }

    /// Loads the manifest in `out_dir`. A missing manifest, or one written
    /// under a different config hash, yields a fresh one.
    pub fn load_or_new(out_dir: &Path, config_hash: &str) -> Result<Self> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(config_hash));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: RunManifest = serde_json::from_str(&text)?;
        if m.config_hash != config_hash {
            tracing::warn!(
                old = %m.config_hash,
                new = %config_hash,
                "config changed since the last run; every stage starts over"
            );
            return Ok(Self::new(config_hash));
        }
        for s in Stage::ALL {
            m.stages.entry(s).or_default();
        }
        Ok(m)
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(MANIFEST_FILE);
        let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stages
            .get(&stage)
            .map(|r| r.status)
            .unwrap_or_default()
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.get(&stage)
    }

    pub fn begin(&mut self, stage: Stage) {
        let r = self.stages.entry(stage).or_default();
        r.status = StageStatus::Pending;
        r.started_at = Some(Utc::now());
        r.finished_at = None;
        r.message = None;
        for d in stage.dependents() {
            self.stages.entry(d).or_default().status = StageStatus::Pending;
        }
    }

    /// Marks `stage` done with its artifacts. An artifact claimed by another
    /// stage moves to this one, so each file has exactly one owner.
    pub fn finish(&mut self, stage: Stage, artifacts: Vec<PathBuf>, message: Option<String>) {
        for (s, r) in self.stages.iter_mut() {
            if *s != stage {
                r.artifacts.retain(|a| !artifacts.contains(a));
            }
        }
        let r = self.stages.entry(stage).or_default();
        r.status = StageStatus::Done;
        r.artifacts = artifacts;
        r.finished_at = Some(Utc::now());
        r.message = message;
    }

    /// Records a partial run: artifacts are kept but the stage stays pending.
    pub fn pause(&mut self, stage: Stage, artifacts: Vec<PathBuf>, message: String) {
        self.finish(stage, artifacts, Some(message));
        self.stages.entry(stage).or_default().status = StageStatus::Pending;
    }

    pub fn fail(&mut self, stage: Stage, message: String) {
        let r = self.stages.entry(stage).or_default();
        r.status = StageStatus::Failed;
        r.finished_at = Some(Utc::now());
        r.message = Some(message);
    }
}
