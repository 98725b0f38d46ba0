//! Automatic evaluation: tokenization, n-gram and embedding metrics,
//! best-reference aggregation and report rendering.

mod lexical;
mod ragrefs;
mod report;
mod semantic;
mod tokenize;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lexical::{
    bleu, lcs_len, ngram_precisions, rouge_l, rouge_lsum, rouge_n, split_sentences, Prf,
};
pub use ragrefs::{
    mean_std, ragrefs, MetricReport, QueryScore, RagrefsOutput, RougeVariant, Scorer,
};
pub use report::{
    correlate, format_cell, format_report, pearson, round_half_away, CorrelationCell,
    CorrelationMatrix, RenderedReport, REPORT_COLUMNS,
};
pub use semantic::{embed_f1, greedy_match, ExternalScorer};
pub use tokenize::{tokenize, TokenSequence};

pub(crate) use report::csv_escape as report_csv_escape;

/// Every metric is higher-is-better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "bleu")]
    Bleu,
    #[serde(rename = "bleu_p1")]
    BleuP1,
    #[serde(rename = "bleu_p2")]
    BleuP2,
    #[serde(rename = "bleu_p3")]
    BleuP3,
    #[serde(rename = "bleu_p4")]
    BleuP4,
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rouge2")]
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
    #[serde(rename = "rougeLsum")]
    RougeLsum,
    #[serde(rename = "embed_f1")]
    EmbedF1,
    #[serde(rename = "external_scorer")]
    ExternalScorer,
}

impl MetricKind {
    pub const ALL: [MetricKind; 11] = [
        MetricKind::Bleu,
        MetricKind::BleuP1,
        MetricKind::BleuP2,
        MetricKind::BleuP3,
        MetricKind::BleuP4,
        MetricKind::Rouge1,
        MetricKind::Rouge2,
        MetricKind::RougeL,
        MetricKind::RougeLsum,
        MetricKind::EmbedF1,
        MetricKind::ExternalScorer,
    ];

    /// Metrics computable without any model or endpoint.
    pub const LEXICAL: [MetricKind; 9] = [
        MetricKind::Bleu,
        MetricKind::BleuP1,
        MetricKind::BleuP2,
        MetricKind::BleuP3,
        MetricKind::BleuP4,
        MetricKind::Rouge1,
        MetricKind::Rouge2,
        MetricKind::RougeL,
        MetricKind::RougeLsum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Bleu => "bleu",
            MetricKind::BleuP1 => "bleu_p1",
            MetricKind::BleuP2 => "bleu_p2",
            MetricKind::BleuP3 => "bleu_p3",
            MetricKind::BleuP4 => "bleu_p4",
            MetricKind::Rouge1 => "rouge1",
            MetricKind::Rouge2 => "rouge2",
            MetricKind::RougeL => "rougeL",
            MetricKind::RougeLsum => "rougeLsum",
            MetricKind::EmbedF1 => "embed_f1",
            MetricKind::ExternalScorer => "external_scorer",
        }
    }

    pub fn higher_is_better(self) -> bool {
        true
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}
