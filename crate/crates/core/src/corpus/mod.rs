//! Term/paraphrase dataset handling and knowledge-base construction.

mod chunk;
mod kb;
mod wiki;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use chunk::{chunk_kb, reassemble, Chunk, Granularity, MIN_CHUNK_TOKENS};
pub use kb::{
    build_kb, normalize_title, read_kb_jsonl, title_matches, write_kb_jsonl, write_misses, KbBuild,
    KbDocument, KbParams,
};
pub use wiki::{
    HttpWikiClient, HttpWikiConfig, RecordedWikiClient, WikiBundle, WikiClient, WikiPage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    #[default]
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseRecord {
    pub term: String,
    pub references: Vec<String>,
    #[serde(default)]
    pub split: Split,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Tsv,
    Jsonl,
}

impl DatasetFormat {
    /// Guesses from the file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => DatasetFormat::Jsonl,
            _ => DatasetFormat::Tsv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadedDataset {
    pub records: Vec<ParaphraseRecord>,
    /// Data rows read, excluding a header line.
    pub rows_read: usize,
    /// Repeated (term, paraphrase) rows that were dropped.
    pub duplicates_dropped: usize,
}

impl LoadedDataset {
    pub fn pair_count(&self) -> usize {
        self.records.iter().map(|r| r.references.len()).sum()
    }
}

#[derive(Deserialize)]
struct JsonRow {
    term: Option<String>,
    paraphrase: Option<String>,
}

/// Loads term/paraphrase rows and groups them by term, in order of first
/// appearance. Fields are trimmed; a TSV header `term<TAB>paraphrase` is
/// skipped. Columns after the second are ignored.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LoadedDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let malformed = |row: usize, message: &str| Error::MalformedRow {
        path: path.to_path_buf(),
        row,
        message: message.to_string(),
    };

    let mut rows: Vec<(usize, String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (term, para) = match format {
            DatasetFormat::Tsv => {
                let mut cols = line.split('\t');
                let term = cols.next().unwrap_or("").trim().to_string();
                let Some(para) = cols.next() else {
                    return Err(malformed(row, "missing paraphrase column"));
                };
                (term, para.trim().to_string())
            }
            DatasetFormat::Jsonl => {
                let parsed: JsonRow = serde_json::from_str(line)
                    .map_err(|e| malformed(row, &format!("invalid JSON: {e}")))?;
                let term = parsed
                    .term
                    .ok_or_else(|| malformed(row, "missing \"term\" field"))?;
                let para = parsed
                    .paraphrase
                    .ok_or_else(|| malformed(row, "missing \"paraphrase\" field"))?;
                (term.trim().to_string(), para.trim().to_string())
            }
        };
        if format == DatasetFormat::Tsv
            && rows.is_empty()
            && term.eq_ignore_ascii_case("term")
            && para.eq_ignore_ascii_case("paraphrase")
        {
            continue;
        }
        if term.is_empty() {
            return Err(malformed(row, "empty term"));
        }
        if para.is_empty() {
            return Err(malformed(row, "empty paraphrase"));
        }
        rows.push((row, term, para));
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }

    let rows_read = rows.len();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut records: Vec<ParaphraseRecord> = Vec::new();
    let mut duplicates_dropped = 0;
    for (row, term, para) in rows {
        if !seen.insert((term.clone(), para.clone())) {
            duplicates_dropped += 1;
            continue;
        }
        let slot = *index.entry(term.clone()).or_insert_with(|| {
            records.push(ParaphraseRecord {
                term: term.clone(),
                references: Vec::new(),
                split: Split::Unassigned,
                source_id: format!("{source}:{row}"),
            });
            records.len() - 1
        });
        records[slot].references.push(para);
    }
    if duplicates_dropped > 0 {
        tracing::warn!(duplicates_dropped, "dropped duplicate term/paraphrase rows");
    }
    Ok(LoadedDataset {
        records,
        rows_read,
        duplicates_dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = SplitRatios {
            train,
            validation,
            test,
        };
        if [train, validation, test]
            .iter()
            .any(|v| !v.is_finite() || *v <= 0.0)
        {
            return Err(Error::InvalidArgument(
                "split ratios must be positive".into(),
            ));
        }
        if (train + validation + test - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios sum to {}, expected 1",
                train + validation + test
            )));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<ParaphraseRecord>,
    pub validation: Vec<ParaphraseRecord>,
    pub test: Vec<ParaphraseRecord>,
}

impl DatasetSplit {
    pub fn pair_counts(&self) -> [usize; 3] {
        let count = |v: &[ParaphraseRecord]| v.iter().map(|r| r.references.len()).sum();
        [
            count(&self.train),
            count(&self.validation),
            count(&self.test),
        ]
    }

    pub fn all(&self) -> impl Iterator<Item = &ParaphraseRecord> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn get(&self, split: Split) -> &[ParaphraseRecord] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::Unassigned => &[],
        }
    }
}

/// Splits by unique term so no term spans two splits.
///
/// Terms are shuffled with a ChaCha8 generator seeded by `seed`, then
/// assigned greedily: a term goes to the current split unless adding it would
/// overshoot that split's pair target by more than half the term's own pair
/// count, in which case filling moves on to the next split. Each split keeps
/// the records' input order.
pub fn split_by_term(
    records: &[ParaphraseRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    if records.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 records to populate every split, got {}",
            records.len()
        )));
    }
    if records.iter().any(|r| r.split != Split::Unassigned) {
        return Err(Error::InvalidArgument(
            "records are already assigned to a split".into(),
        ));
    }
    let total: usize = records.iter().map(|r| r.references.len()).sum();
    let targets = [
        ratios.train * total as f64,
        ratios.validation * total as f64,
        ratios.test * total as f64,
    ];

    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut assignment = vec![0usize; records.len()];
    let mut filled = [0f64; 3];
    let mut current = 0;
    for &i in &order {
        let n = records[i].references.len() as f64;
        while current < 2 && filled[current] + n > targets[current] + n / 2.0 {
            current += 1;
        }
        assignment[i] = current;
        filled[current] += n;
    }

    // Every split must hold at least one term: borrow the last-shuffled term
    // from the nearest split that can spare one.
    for target in 0..3 {
        if assignment.contains(&target) {
            continue;
        }
        let donor = order
            .iter()
            .rev()
            .copied()
            .find(|&i| assignment.iter().filter(|&&a| a == assignment[i]).count() > 1)
            .expect("at least 3 records");
        assignment[donor] = target;
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (record, &a) in records.iter().zip(&assignment) {
        let mut r = record.clone();
        match a {
            0 => {
                r.split = Split::Train;
                split.train.push(r);
            }
            1 => {
                r.split = Split::Validation;
                split.validation.push(r);
            }
            _ => {
                r.split = Split::Test;
                split.test.push(r);
            }
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub std: f64,
}

/// Words = Unicode-whitespace-separated pieces of the trimmed text, with
/// punctuation left attached.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Length statistics over every reference paraphrase; `std` is the
/// population standard deviation.
pub fn paraphrase_length_stats(records: &[ParaphraseRecord]) -> Result<LengthStats> {
    let counts: Vec<usize> = records
        .iter()
        .flat_map(|r| r.references.iter().map(|p| word_count(p)))
        .collect();
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no references present".into()));
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(LengthStats {
        min: *counts.iter().min().expect("non-empty"),
        max: *counts.iter().max().expect("non-empty"),
        mean,
        std: var.sqrt(),
    })
}
