//! Inter-annotator agreement and manual-evaluation summaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub annotator_id: String,
    /// 1 = fluent and easy for laypeople, 3 = hard to understand.
    pub readability: u8,
    pub completeness_strict: u8,
    pub completeness_relaxed: u8,
    pub correctness_strict: u8,
    pub correctness_relaxed: u8,
}

impl AnnotationRecord {
    /// Checks every criterion against its domain, naming the first offending
    /// field.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=3).contains(&self.readability) {
            return Err("readability".into());
        }
        for c in &ManualCriterion::ALL[1..] {
            if self.value(*c) > 1 {
                return Err(c.name().into());
            }
        }
        Ok(())
    }

    pub fn value(&self, criterion: ManualCriterion) -> u8 {
        match criterion {
            ManualCriterion::Readability => self.readability,
            ManualCriterion::CompletenessStrict => self.completeness_strict,
            ManualCriterion::CompletenessRelaxed => self.completeness_relaxed,
            ManualCriterion::CorrectnessStrict => self.correctness_strict,
            ManualCriterion::CorrectnessRelaxed => self.correctness_relaxed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManualCriterion {
    Readability,
    CompletenessStrict,
    CompletenessRelaxed,
    CorrectnessStrict,
    CorrectnessRelaxed,
}

impl ManualCriterion {
    pub const ALL: [ManualCriterion; 5] = [
        ManualCriterion::Readability,
        ManualCriterion::CompletenessStrict,
        ManualCriterion::CompletenessRelaxed,
        ManualCriterion::CorrectnessStrict,
        ManualCriterion::CorrectnessRelaxed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ManualCriterion::Readability => "readability",
            ManualCriterion::CompletenessStrict => "completeness_strict",
            ManualCriterion::CompletenessRelaxed => "completeness_relaxed",
            ManualCriterion::CorrectnessStrict => "correctness_strict",
            ManualCriterion::CorrectnessRelaxed => "correctness_relaxed",
        }
    }

    /// The value a tie resolves to: the worse judgment.
    fn worse(self, a: u8, b: u8) -> u8 {
        match self {
            ManualCriterion::Readability => a.max(b),
            _ => a.min(b),
        }
    }
}

impl fmt::Display for ManualCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ManualCriterion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ManualCriterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown criterion {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alpha {
    pub value: f64,
    /// Expected disagreement was zero (a single category overall); the
    /// value is 1 by convention.
    pub degenerate: bool,
}

/// Nominal Krippendorff's alpha over units, each holding the values it
/// received from however many coders rated it. Units with fewer than two
/// values are not pairable and are ignored.
///
/// Built from the coincidence matrix `o[c][k] = Σ_u (#pairs (c,k) in u) /
/// (m_u - 1)`, with `alpha = 1 - (n - 1) Σ_{c≠k} o[c][k] / Σ_{c≠k} n_c n_k`.
pub fn alpha_nominal<V: Ord + Clone>(units: &[Vec<V>]) -> Result<Alpha> {
    let mut coincidence: BTreeMap<(V, V), f64> = BTreeMap::new();
    for values in units.iter().filter(|v| v.len() >= 2) {
        let weight = 1.0 / (values.len() - 1) as f64;
        for (i, a) in values.iter().enumerate() {
            for (j, b) in values.iter().enumerate() {
                if i != j {
                    *coincidence.entry((a.clone(), b.clone())).or_insert(0.0) += weight;
                }
            }
        }
    }
    if coincidence.is_empty() {
        return Err(Error::Agreement("no pairable values".into()));
    }
    let mut marginals: BTreeMap<V, f64> = BTreeMap::new();
    for ((c, _), o) in &coincidence {
        *marginals.entry(c.clone()).or_insert(0.0) += o;
    }
    let n: f64 = marginals.values().sum();
    let observed: f64 = coincidence
        .iter()
        .filter(|((c, k), _)| c != k)
        .map(|(_, o)| o)
        .sum();
    let margins: Vec<f64> = marginals.values().copied().collect();
    let total: f64 = margins.iter().sum();
    let expected: f64 = total * total - margins.iter().map(|m| m * m).sum::<f64>();
    if expected == 0.0 {
        return Ok(Alpha {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Alpha {
        value: 1.0 - (n - 1.0) * observed / expected,
        degenerate: false,
    })
}

/// Values per sample for one criterion, in ascending sample id order. Within
/// a sample the values follow ascending annotator id.
fn units(records: &[AnnotationRecord], criterion: ManualCriterion) -> BTreeMap<&str, Vec<u8>> {
    let mut by_sample: BTreeMap<&str, BTreeMap<&str, u8>> = BTreeMap::new();
    for r in records {
        by_sample
            .entry(r.sample_id.as_str())
            .or_default()
            .insert(r.annotator_id.as_str(), r.value(criterion));
    }
    by_sample
        .into_iter()
        .map(|(s, m)| (s, m.into_values().collect()))
        .collect()
}

fn annotator_count(records: &[AnnotationRecord]) -> usize {
    records
        .iter()
        .map(|r| r.annotator_id.as_str())
        .collect::<BTreeSet<_>>()
        .len()
}

pub fn krippendorff_alpha_nominal(
    records: &[AnnotationRecord],
    criterion: ManualCriterion,
) -> Result<Alpha> {
    if annotator_count(records) < 2 {
        return Err(Error::Agreement(
            "agreement needs at least two annotators".into(),
        ));
    }
    let units: Vec<Vec<u8>> = units(records, criterion).into_values().collect();
    alpha_nominal(&units)
}

/// Fraction of multiply-annotated samples on which every annotator gave the
/// same value. Singly-annotated samples are left out of the denominator.
pub fn percent_agreement(records: &[AnnotationRecord], criterion: ManualCriterion) -> Result<f64> {
    let units = units(records, criterion);
    let multi: Vec<&Vec<u8>> = units.values().filter(|v| v.len() >= 2).collect();
    if multi.is_empty() {
        return Err(Error::Agreement("no multiply-annotated items".into()));
    }
    let agreeing = multi
        .iter()
        .filter(|v| v.iter().all(|x| *x == v[0]))
        .count();
    Ok(agreeing as f64 / multi.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Grouping label, e.g. a token budget and fine-tuning block; `all` for
    /// the full record set.
    pub block: String,
    pub criterion: ManualCriterion,
    /// `None` when the block has no pairable values.
    pub alpha: Option<f64>,
    pub alpha_degenerate: bool,
    pub percent_agreement: Option<f64>,
    pub n_items: usize,
    pub n_annotators: usize,
}

/// One report per (block, criterion). `blocks` maps sample ids to a block
/// label; samples missing from it fall into no block but still count towards
/// `all`. Blocks are emitted in ascending label order after `all`.
pub fn agreement_reports(
    records: &[AnnotationRecord],
    blocks: &BTreeMap<String, String>,
) -> Vec<AgreementReport> {
    if records.is_empty() {
        return Vec::new();
    }
    let mut grouped: BTreeMap<&str, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        if let Some(b) = blocks.get(&r.sample_id) {
            grouped.entry(b.as_str()).or_default().push(r.clone());
        }
    }
    let mut out = Vec::new();
    let mut emit = |label: &str, recs: &[AnnotationRecord]| {
        let n_items = recs
            .iter()
            .map(|r| r.sample_id.as_str())
            .collect::<BTreeSet<_>>()
            .len();
        for criterion in ManualCriterion::ALL {
            let alpha = krippendorff_alpha_nominal(recs, criterion).ok();
            out.push(AgreementReport {
                block: label.to_string(),
                criterion,
                alpha: alpha.map(|a| a.value),
                alpha_degenerate: alpha.is_some_and(|a| a.degenerate),
                percent_agreement: percent_agreement(recs, criterion).ok(),
                n_items,
                n_annotators: annotator_count(recs),
            });
        }
    };
    emit("all", records);
    for (label, recs) in &grouped {
        emit(label, recs);
    }
    out
}

fn fmt_opt(v: Option<f64>, pct: bool) -> String {
    match v {
        Some(x) if pct => format!("{}%", crate::metrics::round_half_away(x * 100.0, 0)),
        Some(x) => crate::metrics::round_half_away(x, 3),
        None => "n/a".into(),
    }
}

/// Text and CSV renderings: one row per criterion, grouped by block.
pub fn render_agreement(reports: &[AgreementReport]) -> (String, String) {
    let mut text = String::new();
    let mut csv = String::from(
        "block,criterion,alpha_nominal,alpha_degenerate,percent_agreement,n_items,n_annotators\n",
    );
    if reports.is_empty() {
        text.push_str("no annotations\n");
    }
    let mut current: Option<&str> = None;
    for r in reports {
        if current != Some(r.block.as_str()) {
            text.push_str(&format!("[{}]\n", r.block));
            text.push_str(&format!(
                "{:<22}{:>10}{:>12}\n",
                "criterion", "alpha", "agreement"
            ));
            current = Some(r.block.as_str());
        }
        text.push_str(&format!(
            "{:<22}{:>10}{:>12}\n",
            r.criterion.name(),
            fmt_opt(r.alpha, false),
            fmt_opt(r.percent_agreement, true),
        ));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            crate::metrics::report_csv_escape(&r.block),
            r.criterion.name(),
            r.alpha.map(|a| format!("{a:.9}")).unwrap_or_default(),
            r.alpha_degenerate,
            r.percent_agreement
                .map(|a| format!("{a:.6}"))
                .unwrap_or_default(),
            r.n_items,
            r.n_annotators
        ));
    }
    (text, csv)
}

/// Manual-evaluation summary of one configuration. Percentages are 0–100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualSummary {
    pub config_id: String,
    pub n_items: usize,
    pub readability_mean: f64,
    pub completeness_strict_pct: f64,
    pub completeness_relaxed_pct: f64,
    pub correctness_strict_pct: f64,
    pub correctness_relaxed_pct: f64,
    /// Items where at least one criterion's majority vote was tied.
    pub tied_items: Vec<String>,
}

impl ManualSummary {
    pub fn value(&self, criterion: ManualCriterion) -> f64 {
        match criterion {
            ManualCriterion::Readability => self.readability_mean,
            ManualCriterion::CompletenessStrict => self.completeness_strict_pct,
            ManualCriterion::CompletenessRelaxed => self.completeness_relaxed_pct,
            ManualCriterion::CorrectnessStrict => self.correctness_strict_pct,
            ManualCriterion::CorrectnessRelaxed => self.correctness_relaxed_pct,
        }
    }
}

/// Majority vote; ties resolve to the worse value. Returns (value, tied).
pub fn majority_vote(values: &[u8], criterion: ManualCriterion) -> (u8, bool) {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_insert(0) += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let leaders: Vec<u8> = counts
        .iter()
        .filter(|(_, &c)| c == top)
        .map(|(&v, _)| v)
        .collect();
    let value = leaders
        .iter()
        .copied()
        .reduce(|a, b| criterion.worse(a, b))
        .unwrap_or(0);
    (value, leaders.len() > 1)
}

/// Per-configuration summaries, in ascending config id order. Every record's
/// sample id must resolve through `sample_config`.
pub fn aggregate_manual(
    records: &[AnnotationRecord],
    sample_config: &HashMap<String, String>,
) -> Result<Vec<ManualSummary>> {
    let mut by_config: BTreeMap<&str, BTreeMap<&str, Vec<&AnnotationRecord>>> = BTreeMap::new();
    for r in records {
        let config = sample_config
            .get(&r.sample_id)
            .ok_or_else(|| Error::Agreement(format!("unresolvable sample_id {:?}", r.sample_id)))?;
        by_config
            .entry(config.as_str())
            .or_default()
            .entry(r.sample_id.as_str())
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for (config, samples) in by_config {
        let n = samples.len() as f64;
        let mut sums = [0f64; 5];
        let mut tied_items = Vec::new();
        for (sample, recs) in &samples {
            let mut tied = false;
            for (i, c) in ManualCriterion::ALL.into_iter().enumerate() {
                let values: Vec<u8> = recs.iter().map(|r| r.value(c)).collect();
                let (v, t) = majority_vote(&values, c);
                sums[i] += f64::from(v);
                tied |= t;
            }
            if tied {
                tied_items.push(sample.to_string());
            }
        }
        out.push(ManualSummary {
            config_id: config.to_string(),
            n_items: samples.len(),
            readability_mean: sums[0] / n,
            completeness_strict_pct: 100.0 * sums[1] / n,
            completeness_relaxed_pct: 100.0 * sums[2] / n,
            correctness_strict_pct: 100.0 * sums[3] / n,
            correctness_relaxed_pct: 100.0 * sums[4] / n,
            tied_items,
        });
    }
    Ok(out)
}
