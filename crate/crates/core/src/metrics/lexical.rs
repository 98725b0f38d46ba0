//! BLEU and ROUGE over token sequences.

use std::collections::HashMap;

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    fn from_hits(hits: usize, candidate_len: usize, reference_len: usize) -> Self {
        let precision = ratio(hits, candidate_len);
        let recall = ratio(hits, reference_len);
        Prf::new(precision, recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        let key: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

/// Count of candidate n-grams that also occur in the reference, each clipped
/// to its reference count.
fn clipped_overlap<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> usize {
    let cand = ngram_counts(candidate, n);
    let reference = ngram_counts(reference, n);
    cand.iter()
        .map(|(gram, &c)| c.min(reference.get(gram).copied().unwrap_or(0)))
        .sum()
}

fn ngram_total(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

/// Modified (clipped) n-gram precision for n = 1..=4. `p_n` is 0 when the
/// candidate has fewer than n tokens.
pub fn ngram_precisions<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (i, p) in out.iter_mut().enumerate() {
        let n = i + 1;
        *p = ratio(
            clipped_overlap(candidate, reference, n),
            ngram_total(candidate.len(), n),
        );
    }
    out
}

/// Sentence BLEU with uniform weights over 1..4-grams.
///
/// Zero precisions are floored at `1 / (2 * candidate_len)`; the brevity
/// penalty is `min(1, exp(1 - r / c))`. An empty candidate scores 0.
pub fn bleu<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    let c = candidate.len();
    if c == 0 {
        return 0.0;
    }
    let floor = 1.0 / (2.0 * c as f64);
    let log_sum: f64 = ngram_precisions(candidate, reference)
        .iter()
        .map(|&p| if p > 0.0 { p } else { floor }.ln())
        .sum();
    let bp = (1.0 - reference.len() as f64 / c as f64).exp().min(1.0);
    (bp * (log_sum / 4.0).exp()).clamp(0.0, 1.0)
}

/// ROUGE-N with clipped overlap.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Prf {
    Prf::from_hits(
        clipped_overlap(candidate, reference, n),
        ngram_total(candidate.len(), n),
        ngram_total(reference.len(), n),
    )
}

fn lcs_table<S: AsRef<str>>(a: &[S], b: &[S]) -> Vec<Vec<usize>> {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1].as_ref() == b[j - 1].as_ref() {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table
}

/// Indices into `reference` of one longest common subsequence with
/// `candidate`. On ties the backtrack moves along the reference.
fn lcs_reference_indices<S: AsRef<str>>(reference: &[S], candidate: &[S]) -> Vec<usize> {
    let table = lcs_table(reference, candidate);
    let (mut i, mut j) = (reference.len(), candidate.len());
    let mut picked = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1].as_ref() == candidate[j - 1].as_ref() {
            picked.push(i - 1);
            i -= 1;
            j -= 1;
        } else if table[i][j - 1] > table[i - 1][j] {
            j -= 1;
        } else {
            i -= 1;
        }
    }
    picked.reverse();
    picked
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// ROUGE-L over whole sequences.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Prf {
    Prf::from_hits(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

/// Splits after each `.`, `!` or `?` token. Trailing tokens without a
/// terminator form the last sentence.
pub fn split_sentences<S: AsRef<str>>(tokens: &[S]) -> Vec<&[S]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if matches!(t.as_ref(), "." | "!" | "?") {
            out.push(&tokens[start..=i]);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(&tokens[start..]);
    }
    out
}

/// Summary-level ROUGE-L: for each reference sentence, the union of its LCS
/// positions against every candidate sentence; hits are clipped by the
/// remaining token counts on both sides.
pub fn rouge_lsum<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::default();
    }
    let cand_sents = split_sentences(candidate);
    let ref_sents = split_sentences(reference);

    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in candidate {
        *cand_counts.entry(t.as_ref()).or_insert(0) += 1;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *ref_counts.entry(t.as_ref()).or_insert(0) += 1;
    }

    let mut hits = 0;
    for r in &ref_sents {
        let mut union: Vec<usize> = cand_sents
            .iter()
            .flat_map(|c| lcs_reference_indices(r, c))
            .collect();
        union.sort_unstable();
        union.dedup();
        for idx in union {
            let tok = r[idx].as_ref();
            let (Some(cc), Some(rc)) = (cand_counts.get_mut(tok), ref_counts.get_mut(tok)) else {
                continue;
            };
            if *cc > 0 && *rc > 0 {
                hits += 1;
                *cc -= 1;
                *rc -= 1;
            }
        }
    }
    Prf::from_hits(hits, candidate.len(), reference.len())
}
