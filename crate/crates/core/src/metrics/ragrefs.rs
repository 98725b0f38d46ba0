//! Best-reference aggregation: each query keeps, per metric, the maximum
//! score over its reference paraphrases; a configuration's score is the mean
//! of those maxima over its queries.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::lexical::{bleu, ngram_precisions, rouge_l, rouge_lsum, rouge_n, Prf};
use super::semantic::{embed_tokens_or_empty, greedy_match, ExternalScorer};
use super::tokenize::tokenize;
use super::MetricKind;
use crate::corpus::ParaphraseRecord;
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::generator::GenerationRun;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeVariant {
    #[default]
    F1,
    Recall,
    Precision,
}

impl RougeVariant {
    fn pick(self, s: Prf) -> f64 {
        match self {
            RougeVariant::F1 => s.f1,
            RougeVariant::Recall => s.recall,
            RougeVariant::Precision => s.precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query_id: String,
    pub per_metric: BTreeMap<MetricKind, f64>,
    pub chosen_reference: BTreeMap<MetricKind, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_id: String,
    pub n_queries: usize,
    pub mean: BTreeMap<MetricKind, f64>,
    pub std: BTreeMap<MetricKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagrefsOutput {
    pub scores: Vec<QueryScore>,
    pub report: MetricReport,
    /// Query ids whose term has no reference record.
    pub excluded: Vec<String>,
}

/// Pairwise metric computation for one (candidate, reference) pair.
pub struct Scorer<'a> {
    pub metrics: Vec<MetricKind>,
    pub embedder: Option<&'a dyn Embedder>,
    pub external: Option<&'a ExternalScorer>,
    pub rouge: RougeVariant,
}

impl<'a> Scorer<'a> {
    pub fn lexical(metrics: &[MetricKind]) -> Self {
        Scorer {
            metrics: metrics.to_vec(),
            embedder: None,
            external: None,
            rouge: RougeVariant::F1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::InvalidArgument("metric list is empty".into()));
        }
        if self.metrics.contains(&MetricKind::EmbedF1) && self.embedder.is_none() {
            return Err(Error::InvalidArgument(
                "embed_f1 requires an embedder".into(),
            ));
        }
        if self.metrics.contains(&MetricKind::ExternalScorer) && self.external.is_none() {
            return Err(Error::InvalidArgument(
                "external_scorer requires a scorer endpoint".into(),
            ));
        }
        Ok(())
    }

    /// Scores `candidate` against every reference, returning one metric map
    /// per reference in input order.
    pub fn score_references(
        &self,
        candidate: &str,
        references: &[String],
    ) -> Result<Vec<BTreeMap<MetricKind, f64>>> {
        self.validate()?;
        let cand = tokenize(candidate).tokens;
        let cand_vecs = match (self.metrics.contains(&MetricKind::EmbedF1), self.embedder) {
            (true, Some(e)) => embed_tokens_or_empty(e, candidate)?,
            _ => Vec::new(),
        };
        let mut out = Vec::with_capacity(references.len());
        for reference in references {
            let refs = tokenize(reference).tokens;
            let precisions = ngram_precisions(&cand, &refs);
            let mut row = BTreeMap::new();
            for &m in &self.metrics {
                let v = match m {
                    MetricKind::Bleu => bleu(&cand, &refs),
                    MetricKind::BleuP1 => precisions[0],
                    MetricKind::BleuP2 => precisions[1],
                    MetricKind::BleuP3 => precisions[2],
                    MetricKind::BleuP4 => precisions[3],
                    MetricKind::Rouge1 => self.rouge.pick(rouge_n(&cand, &refs, 1)),
                    MetricKind::Rouge2 => self.rouge.pick(rouge_n(&cand, &refs, 2)),
                    MetricKind::RougeL => self.rouge.pick(rouge_l(&cand, &refs)),
                    MetricKind::RougeLsum => self.rouge.pick(rouge_lsum(&cand, &refs)),
                    MetricKind::EmbedF1 => {
                        let e = self.embedder.expect("validated");
                        let ref_vecs = embed_tokens_or_empty(e, reference)?;
                        greedy_match(&cand_vecs, &ref_vecs).f1
                    }
                    MetricKind::ExternalScorer => self
                        .external
                        .expect("validated")
                        .score(candidate, reference)?,
                };
                row.insert(m, v);
            }
            out.push(row);
        }
        Ok(out)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores the runs of one configuration against their reference sets.
///
/// Runs are scored in ascending `query_id` order. On ties the lowest
/// reference index is recorded as the chosen reference.
pub fn ragrefs(
    config_id: &str,
    runs: &[GenerationRun],
    records: &[ParaphraseRecord],
    scorer: &Scorer<'_>,
) -> Result<RagrefsOutput> {
    let by_term: HashMap<&str, &ParaphraseRecord> =
        records.iter().map(|r| (r.term.as_str(), r)).collect();
    let mut ordered: Vec<&GenerationRun> = runs.iter().collect();
    ordered.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let mut scores = Vec::new();
    let mut excluded = Vec::new();
    for run in ordered {
        let Some(record) = by_term
            .get(run.term.as_str())
            .filter(|r| !r.references.is_empty())
        else {
            excluded.push(run.query_id.clone());
            continue;
        };
        let rows = scorer.score_references(&run.output_text, &record.references)?;
        let mut per_metric = BTreeMap::new();
        let mut chosen = BTreeMap::new();
        for &m in &scorer.metrics {
            let (best_idx, best) = rows.iter().enumerate().map(|(j, row)| (j, row[&m])).fold(
                (0, f64::NEG_INFINITY),
                |acc, (j, v)| {
                    if v > acc.1 {
                        (j, v)
                    } else {
                        acc
                    }
                },
            );
            per_metric.insert(m, best);
            chosen.insert(m, best_idx);
        }
        scores.push(QueryScore {
            query_id: run.query_id.clone(),
            per_metric,
            chosen_reference: chosen,
        });
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "configuration {config_id}: no scorable queries ({} excluded)",
            excluded.len()
        )));
    }

    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for &m in &scorer.metrics {
        let column: Vec<f64> = scores.iter().map(|s| s.per_metric[&m]).collect();
        let (mu, sd) = mean_std(&column);
        mean.insert(m, mu);
        std.insert(m, sd);
    }
    Ok(RagrefsOutput {
        report: MetricReport {
            config_id: config_id.to_string(),
            n_queries: scores.len(),
            mean,
            std,
        },
        scores,
        excluded,
    })
}
