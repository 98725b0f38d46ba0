//! Table rendering and metric/manual-score correlation.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{MetricKind, MetricReport};
use crate::agreement::{ManualCriterion, ManualSummary};
use crate::error::{Error, Result};

/// Report column order: bleu, embedding score, external score, the ROUGE
/// family, then the four n-gram precisions.
pub const REPORT_COLUMNS: [MetricKind; 11] = [
    MetricKind::Bleu,
    MetricKind::EmbedF1,
    MetricKind::ExternalScorer,
    MetricKind::Rouge1,
    MetricKind::Rouge2,
    MetricKind::RougeL,
    MetricKind::RougeLsum,
    MetricKind::BleuP1,
    MetricKind::BleuP2,
    MetricKind::BleuP3,
    MetricKind::BleuP4,
];

/// Rounds half away from zero at `decimals` places, deciding ties on the
/// shortest decimal representation of `x` (so `0.015` rounds to `0.02`).
pub fn round_half_away(x: f64, decimals: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let negative = x.is_sign_negative() && x != 0.0;
    let repr = format!("{}", x.abs());
    let (int_part, frac_part) = match repr.split_once('.') {
        Some((i, f)) => (i.to_string(), f.to_string()),
        None => (repr.clone(), String::new()),
    };
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(
            frac_part
                .bytes()
                .chain(std::iter::repeat(b'0'))
                .take(decimals),
        )
        .map(|b| b - b'0')
        .collect();
    let round_up = frac_part
        .as_bytes()
        .get(decimals)
        .is_some_and(|&d| d >= b'5');
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - decimals;
    let mut out = String::new();
    let is_zero = digits.iter().all(|&d| d == 0);
    if negative && !is_zero {
        out.push('-');
    }
    for d in &digits[..split] {
        out.push((b'0' + d) as char);
    }
    if decimals > 0 {
        out.push('.');
        for d in &digits[split..] {
            out.push((b'0' + d) as char);
        }
    }
    out
}

/// `m.mm_{s.ss}`
pub fn format_cell(mean: f64, std: f64) -> String {
    format!(
        "{}_{{{}}}",
        round_half_away(mean, 2),
        round_half_away(std, 2)
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub text: String,
    pub csv: String,
}

/// Renders one row per configuration in input order. Metrics absent from a
/// report render as `-` in the text table and empty cells in the CSV.
pub fn format_report(reports: &[MetricReport]) -> RenderedReport {
    let mut header = vec!["config".to_string(), "n".to_string()];
    header.extend(REPORT_COLUMNS.iter().map(|m| m.name().to_string()));

    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.config_id.clone(), r.n_queries.to_string()];
            for m in REPORT_COLUMNS {
                row.push(match (r.mean.get(&m), r.std.get(&m)) {
                    (Some(&mu), Some(&sd)) => format_cell(mu, sd),
                    _ => "-".to_string(),
                });
            }
            row
        })
        .collect();

    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut text = String::new();
    let render = |text: &mut String, cells: &[String]| {
        let line: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(text, "{}", line.join("  ").trim_end());
    };
    render(&mut text, &header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    render(&mut text, &rule);
    for row in &rows {
        render(&mut text, row);
    }

    let mut csv = String::from("config,n_queries");
    for m in REPORT_COLUMNS {
        let _ = write!(csv, ",{0}_mean,{0}_std", m.name());
    }
    csv.push('\n');
    for r in reports {
        let _ = write!(csv, "{},{}", csv_escape(&r.config_id), r.n_queries);
        for m in REPORT_COLUMNS {
            match (r.mean.get(&m), r.std.get(&m)) {
                (Some(mu), Some(sd)) => {
                    let _ = write!(csv, ",{mu:.6},{sd:.6}");
                }
                _ => csv.push_str(",,"),
            }
        }
        csv.push('\n');
    }
    RenderedReport { text, csv }
}

pub(crate) fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub metric: MetricKind,
    pub criterion: ManualCriterion,
    pub pearson: f64,
    /// Set when either series is constant; `pearson` is then 0.
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub configs: Vec<String>,
    pub cells: Vec<CorrelationCell>,
}

impl CorrelationMatrix {
    pub fn get(&self, metric: MetricKind, criterion: ManualCriterion) -> Option<&CorrelationCell> {
        self.cells
            .iter()
            .find(|c| c.metric == metric && c.criterion == criterion)
    }
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlates each automatic metric with each manual criterion across the
/// configurations present in both inputs (matched by config id).
pub fn correlate(auto: &[MetricReport], manual: &[ManualSummary]) -> Result<CorrelationMatrix> {
    let manual_by_id: BTreeMap<&str, &ManualSummary> =
        manual.iter().map(|m| (m.config_id.as_str(), m)).collect();
    let pairs: Vec<(&MetricReport, &ManualSummary)> = auto
        .iter()
        .filter_map(|a| manual_by_id.get(a.config_id.as_str()).map(|m| (a, *m)))
        .collect();
    if pairs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 3 paired configurations, got {}",
            pairs.len()
        )));
    }
    let metrics: Vec<MetricKind> = REPORT_COLUMNS
        .into_iter()
        .filter(|m| pairs.iter().all(|(a, _)| a.mean.contains_key(m)))
        .collect();
    let mut cells = Vec::new();
    for metric in metrics {
        let x: Vec<f64> = pairs.iter().map(|(a, _)| a.mean[&metric]).collect();
        for criterion in ManualCriterion::ALL {
            let y: Vec<f64> = pairs.iter().map(|(_, m)| m.value(criterion)).collect();
            let (pearson, constant) = match pearson(&x, &y) {
                Some(r) => (r, false),
                None => (0.0, true),
            };
            cells.push(CorrelationCell {
                metric,
                criterion,
                pearson,
                constant,
            });
        }
    }
    Ok(CorrelationMatrix {
        configs: pairs.iter().map(|(a, _)| a.config_id.clone()).collect(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(0.70, 0.06), "0.70_{0.06}");
        assert_eq!(format_cell(0.0, 0.0), "0.00_{0.00}");
    }

    #[test]
    fn rounding_half_away_from_zero() {
        assert_eq!(round_half_away(0.005, 2), "0.01");
        assert_eq!(round_half_away(0.015, 2), "0.02");
        assert_eq!(round_half_away(0.004999, 2), "0.00");
        assert_eq!(round_half_away(0.995, 2), "1.00");
        assert_eq!(round_half_away(1.0, 2), "1.00");
        assert_eq!(round_half_away(-0.005, 2), "-0.01");
        assert_eq!(round_half_away(-0.001, 2), "0.00");
        assert_eq!(round_half_away(1e-20, 2), "0.00");
        assert_eq!(round_half_away(12.345, 1), "12.3");
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = format_report(&[]);
        assert_eq!(r.text.lines().count(), 2);
        assert!(r.text.starts_with("config"));
        assert_eq!(r.csv.lines().count(), 1);
    }

    #[test]
    fn report_columns_in_order() {
        let mut mean = BTreeMap::new();
        let mut std = BTreeMap::new();
        mean.insert(MetricKind::Bleu, 0.1234);
        std.insert(MetricKind::Bleu, 0.02);
        mean.insert(MetricKind::Rouge1, 0.70);
        std.insert(MetricKind::Rouge1, 0.06);
        let r = format_report(&[MetricReport {
            config_id: "biomistral|rag".into(),
            n_queries: 3,
            mean,
            std,
        }]);
        let row = r.text.lines().nth(2).unwrap();
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cells[0], "biomistral|rag");
        assert_eq!(cells[2], "0.12_{0.02}");
        assert_eq!(cells[3], "-");
        assert_eq!(cells[5], "0.70_{0.06}");
        assert!(r
            .csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("biomistral|rag,3,0.123400,0.020000,,"));
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        // Hand: x = (1,2,3), y = (3,2,1): sxy = -2, sxx = syy = 2.
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
    }
}
