//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! gating criterion fails on its own terms. A criterion whose external data is
//! missing prints FAIL with a `blocked:` reason but does not fail the target.
//! Non-gating criteria report but never fail.
//!
//! Datasets that cannot ship with the repository are read from the
//! environment: `REFOMED_PATH` points at the RefoMed term/paraphrase file
//! (TSV or JSONL).

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prage::agreement::{
    alpha_nominal, krippendorff_alpha_nominal, AnnotationRecord, ManualCriterion,
};
use prage::corpus::{
    build_kb, load_dataset, paraphrase_length_stats, split_by_term, DatasetFormat, HttpWikiClient,
    HttpWikiConfig, KbParams, ParaphraseRecord, Split, SplitRatios, WikiClient,
};
use prage::embed::{EmbeddingVector, HashingEmbedder};
use prage::generator::{
    enumerate_configurations, BackendConfig, FinishReason, GenerationRun, Mode,
};
use prage::metrics::{
    bleu, ngram_precisions, ragrefs, rouge_l, rouge_lsum, rouge_n, MetricKind, Scorer,
};
use prage::orchestrator::{sample_campaign, LoadedConfig, Pipeline};
use prage::retriever::VectorIndex;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn refomed_path() -> Option<PathBuf> {
    std::env::var_os("REFOMED_PATH").map(PathBuf::from)
}

const BLOCKED: &str = "blocked: RefoMed dataset not available offline (set REFOMED_PATH)";

fn load_refomed(path: &Path) -> Result<Vec<ParaphraseRecord>, String> {
    load_dataset(path, DatasetFormat::from_path(path))
        .map(|d| d.records)
        .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- dataset

fn dataset_split() -> Check {
    let path = refomed_path().ok_or(BLOCKED)?;
    let t = Instant::now();
    let records = load_refomed(&path)?;
    let ratios = SplitRatios::new(0.6, 0.2, 0.2).map_err(|e| e.to_string())?;
    let split = split_by_term(&records, ratios, 13).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();

    let sets: Vec<BTreeSet<&str>> = [Split::Train, Split::Validation, Split::Test]
        .into_iter()
        .map(|s| split.get(s).iter().map(|r| r.term.as_str()).collect())
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            ensure!(
                sets[i].is_disjoint(&sets[j]),
                "splits {i} and {j} share terms"
            );
        }
    }
    let all: BTreeSet<&str> = records.iter().map(|r| r.term.as_str()).collect();
    let union: BTreeSet<&str> = sets.iter().flatten().copied().collect();
    ensure!(
        union == all,
        "splits cover {} of {} terms",
        union.len(),
        all.len()
    );

    let counts = split.pair_counts();
    let targets = [3981.0, 1063.0, 1253.0];
    for (c, t) in counts.iter().zip(targets) {
        ensure!(
            ((*c as f64) - t).abs() <= 0.02 * t,
            "pair counts {counts:?} outside ±2% of {targets:?}"
        );
    }
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("pairs {counts:?}, {:.2}s", elapsed.as_secs_f64()))
}

fn length_statistics() -> Check {
    let path = refomed_path().ok_or(BLOCKED)?;
    let records = load_refomed(&path)?;
    let s = paraphrase_length_stats(&records).map_err(|e| e.to_string())?;
    let detail = format!(
        "min {} max {} mean {:.2} std {:.2}",
        s.min, s.max, s.mean, s.std
    );
    ensure!(s.min == 1 && s.max == 83, "{detail}");
    ensure!((s.mean - 10.34).abs() <= 0.5, "{detail}");
    ensure!((s.std - 8.15).abs() <= 0.5, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- metrics
//
// Oracles work on token slices directly and share no code with the library:
// n-grams are counted by linear scans, the LCS by memoized recursion.

fn count_occurrences(seq: &[&str], gram: &[&str]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len())
        .filter(|&i| &seq[i..i + gram.len()] == gram)
        .count()
}

fn oracle_overlap(c: &[&str], r: &[&str], n: usize) -> (usize, usize, usize) {
    let c_total = if c.len() >= n { c.len() - n + 1 } else { 0 };
    let r_total = if r.len() >= n { r.len() - n + 1 } else { 0 };
    let mut seen: Vec<&[&str]> = Vec::new();
    let mut hits = 0;
    for i in 0..c_total {
        let g = &c[i..i + n];
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        hits += count_occurrences(c, g).min(count_occurrences(r, g));
    }
    (hits, c_total, r_total)
}

fn div(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn oracle_precision(c: &[&str], r: &[&str], n: usize) -> f64 {
    let (h, ct, _) = oracle_overlap(c, r, n);
    div(h, ct)
}

fn oracle_bleu(c: &[&str], r: &[&str]) -> f64 {
    let len = c.len() as f64;
    let mut log = 0.0;
    for n in 1..=4 {
        let p = oracle_precision(c, r, n);
        log += if p == 0.0 { 1.0 / (2.0 * len) } else { p }.ln();
    }
    let bp = if r.len() as f64 > len {
        (1.0 - r.len() as f64 / len).exp()
    } else {
        1.0
    };
    bp * (log / 4.0).exp()
}

fn oracle_rouge_n(c: &[&str], r: &[&str], n: usize) -> f64 {
    let (h, ct, rt) = oracle_overlap(c, r, n);
    f1(div(h, ct), div(h, rt))
}

fn lcs_rec(
    a: &[&str],
    b: &[&str],
    i: usize,
    j: usize,
    memo: &mut HashMap<(usize, usize), usize>,
) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs_rec(a, b, i + 1, j + 1, memo)
    } else {
        lcs_rec(a, b, i + 1, j, memo).max(lcs_rec(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

fn lcs(a: &[&str], b: &[&str]) -> usize {
    lcs_rec(a, b, 0, 0, &mut HashMap::new())
}

fn oracle_rouge_l(c: &[&str], r: &[&str]) -> f64 {
    let l = lcs(c, r);
    f1(div(l, c.len()), div(l, r.len()))
}

/// Positions in `r` of the LCS picked by the reference backtrack convention:
/// walking from the ends, take a match, otherwise step the candidate only
/// when that strictly keeps a longer LCS.
fn lcs_positions(r: &[&str], c: &[&str]) -> Vec<usize> {
    let len = |i: usize, j: usize| lcs(&r[..i], &c[..j]);
    let (mut i, mut j) = (r.len(), c.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if r[i - 1] == c[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if len(i, j - 1) > len(i - 1, j) {
            j -= 1;
        } else {
            i -= 1;
        }
    }
    out
}

fn sentences<'a>(t: &[&'a str]) -> Vec<Vec<&'a str>> {
    let mut out = vec![Vec::new()];
    for &tok in t {
        out.last_mut().unwrap().push(tok);
        if [".", "!", "?"].contains(&tok) {
            out.push(Vec::new());
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

fn oracle_rouge_lsum(c: &[&str], r: &[&str]) -> f64 {
    let mut c_left: HashMap<&str, usize> = HashMap::new();
    let mut r_left: HashMap<&str, usize> = HashMap::new();
    for &t in c {
        *c_left.entry(t).or_default() += 1;
    }
    for &t in r {
        *r_left.entry(t).or_default() += 1;
    }
    let cs = sentences(c);
    let mut hits = 0;
    for rs in sentences(r) {
        let union: BTreeSet<usize> = cs.iter().flat_map(|s| lcs_positions(&rs, s)).collect();
        for p in union {
            let tok = rs[p];
            let (a, b) = (c_left.get(tok).copied().unwrap_or(0), r_left[tok]);
            if a > 0 && b > 0 {
                hits += 1;
                *c_left.get_mut(tok).unwrap() -= 1;
                *r_left.get_mut(tok).unwrap() -= 1;
            }
        }
    }
    f1(div(hits, c.len()), div(hits, r.len()))
}

const VOCAB: [&str; 10] = [
    "le", "coeur", "sang", "de", "la", "maladie", "os", "peau", ".", "?",
];

fn random_tokens(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<&'static str> {
    let n = rng.random_range(min..=max);
    // A skewed draw keeps repeated n-grams common.
    (0..n)
        .map(|_| {
            VOCAB[rng
                .random_range(0..VOCAB.len())
                .min(rng.random_range(0..VOCAB.len()))]
        })
        .collect()
}

fn metric_oracles() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let c = random_tokens(&mut rng, 1, 30);
        let r = random_tokens(&mut rng, 1, 30);
        let p = ngram_precisions(&c, &r);
        let pairs = [
            ("bleu", bleu(&c, &r), oracle_bleu(&c, &r)),
            ("p1", p[0], oracle_precision(&c, &r, 1)),
            ("p2", p[1], oracle_precision(&c, &r, 2)),
            ("p3", p[2], oracle_precision(&c, &r, 3)),
            ("p4", p[3], oracle_precision(&c, &r, 4)),
            ("rouge1", rouge_n(&c, &r, 1).f1, oracle_rouge_n(&c, &r, 1)),
            ("rouge2", rouge_n(&c, &r, 2).f1, oracle_rouge_n(&c, &r, 2)),
            ("rougeL", rouge_l(&c, &r).f1, oracle_rouge_l(&c, &r)),
            (
                "rougeLsum",
                rouge_lsum(&c, &r).f1,
                oracle_rouge_lsum(&c, &r),
            ),
        ];
        for (name, got, want) in pairs {
            let d = (got - want).abs();
            worst = worst.max(d);
            ensure!(
                d <= 1e-9,
                "case {case} {name}: {got} vs oracle {want} ({c:?} / {r:?})"
            );
        }

        // Identity: every metric defined at this length is 1.
        let p = ngram_precisions(&c, &c);
        for n in 1..=4 {
            ensure!(
                c.len() < n || p[n - 1] == 1.0,
                "case {case}: identity p{n} = {}",
                p[n - 1]
            );
        }
        ensure!(
            c.len() < 4 || (bleu(&c, &c) - 1.0).abs() <= 1e-12,
            "case {case}: identity bleu"
        );
        ensure!(rouge_n(&c, &c, 1).f1 == 1.0, "case {case}: identity rouge1");
        ensure!(
            c.len() < 2 || rouge_n(&c, &c, 2).f1 == 1.0,
            "case {case}: identity rouge2"
        );
        ensure!(rouge_l(&c, &c).f1 == 1.0, "case {case}: identity rougeL");
        ensure!(
            rouge_lsum(&c, &c).f1 == 1.0,
            "case {case}: identity rougeLsum"
        );
    }
    let elapsed = t.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "200 pairs, max |diff| {worst:.1e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- ragrefs

fn mock_run(config: &str, term: &str, output: &str) -> GenerationRun {
    GenerationRun {
        query_id: format!("q-{term}"),
        config_id: config.into(),
        term: term.into(),
        mode: Mode::BaseSlm,
        backend_model: "mock".into(),
        encoder_name: None,
        max_tokens: 25,
        prompt_rendered: String::new(),
        context_refs: vec![],
        context_truncated: false,
        output_text: output.into(),
        finish_reason: FinishReason::Stop,
        latency_ms: 0,
        attempts: 1,
        raw_response: None,
    }
}

fn words(rng: &mut ChaCha8Rng) -> String {
    random_tokens(rng, 1, 12)
        .into_iter()
        .filter(|t| t.chars().all(char::is_alphanumeric))
        .chain(std::iter::once("fin"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn ragrefs_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let metrics = MetricKind::LEXICAL.to_vec();
    let scorer = Scorer::lexical(&metrics);
    let mut runs = Vec::new();
    let mut records = Vec::new();
    for i in 0..50 {
        let term = format!("t{i:02}");
        runs.push(mock_run("cfg", &term, &words(&mut rng)));
        let n = rng.random_range(1..=5);
        records.push(ParaphraseRecord {
            term,
            references: (0..n).map(|_| words(&mut rng)).collect(),
            split: Split::Test,
            source_id: format!("fixture:{i}"),
        });
    }
    let out = ragrefs("cfg", &runs, &records, &scorer).map_err(|e| e.to_string())?;

    // Oracle: every (query, reference) pair scored on its own, then max over
    // references, then the mean over queries in query id order.
    let by_term: HashMap<&str, &ParaphraseRecord> =
        records.iter().map(|r| (r.term.as_str(), r)).collect();
    let mut ordered: Vec<&GenerationRun> = runs.iter().collect();
    ordered.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let mut best: Vec<BTreeMap<MetricKind, f64>> = Vec::new();
    for run in &ordered {
        let mut row = BTreeMap::new();
        for reference in &by_term[run.term.as_str()].references {
            let pair = scorer
                .score_references(&run.output_text, std::slice::from_ref(reference))
                .map_err(|e| e.to_string())?;
            for (m, v) in &pair[0] {
                let e = row.entry(*m).or_insert(f64::NEG_INFINITY);
                if *v > *e {
                    *e = *v;
                }
            }
        }
        best.push(row);
    }
    ensure!(
        out.scores.len() == 50,
        "{} queries scored",
        out.scores.len()
    );
    for (q, (got, want)) in out.scores.iter().zip(&best).enumerate() {
        ensure!(
            got.query_id == ordered[q].query_id,
            "query order differs at {q}"
        );
        ensure!(
            &got.per_metric == want,
            "query {q}: {:?} vs oracle {:?}",
            got.per_metric,
            want
        );
    }
    for m in &metrics {
        let col: Vec<f64> = best.iter().map(|r| r[m]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        ensure!(
            out.report.mean[m] == mean,
            "{m} mean {} vs {mean}",
            out.report.mean[m]
        );
        ensure!(
            out.report.std[m] == var.sqrt(),
            "{m} std {} vs {}",
            out.report.std[m],
            var.sqrt()
        );
    }

    for case in 0..50 {
        let mut shuffled = records.clone();
        for r in &mut shuffled {
            r.references.shuffle(&mut rng);
        }
        let mut duplicated = records.clone();
        for r in &mut duplicated {
            let pick = r.references[rng.random_range(0..r.references.len())].clone();
            let at = rng.random_range(0..=r.references.len());
            r.references.insert(at, pick);
        }
        for (kind, variant) in [("permutation", &shuffled), ("duplication", &duplicated)] {
            let o = ragrefs("cfg", &runs, variant, &scorer).map_err(|e| e.to_string())?;
            ensure!(
                o.report == out.report,
                "{kind} changed the report (case {case})"
            );
            for (a, b) in o.scores.iter().zip(&out.scores) {
                ensure!(
                    a.per_metric == b.per_metric,
                    "{kind} changed {} (case {case})",
                    a.query_id
                );
            }
        }
    }
    Ok("50 queries exact; 50 permutation and 50 duplication variants invariant".into())
}

// ---------------------------------------------------------------- retrieval

fn retrieval_exactness() -> Check {
    let dim = 64;
    let emb = HashingEmbedder::new("hash", dim);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stems = [
        "douleur", "coeur", "sang", "os", "peau", "rein", "foie", "poumon", "nerf", "oeil",
    ];
    let mut texts: Vec<String> = (0..1000)
        .map(|i| {
            let a = stems[i % stems.len()];
            let b = stems[(i / 10) % stems.len()];
            format!("{a} {b} {}", i / 100)
        })
        .collect();
    // Exact duplicates give identical vectors, hence tied scores.
    for i in 0..60 {
        texts[900 + i] = texts[i].clone();
    }
    let mut entries: Vec<(String, EmbeddingVector)> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("chunk#{i:04}"), emb.embed_one(t)))
        .collect();
    entries.shuffle(&mut rng);
    let index = VectorIndex::from_entries(dim, entries.clone()).map_err(|e| e.to_string())?;

    let mut ties_seen = 0;
    for q in 0..50 {
        let text = if q % 2 == 0 {
            texts[q].clone()
        } else {
            format!("{} {}", stems[q % 10], q)
        };
        let qv = emb.embed_one(&text);
        // Oracle: score everything, sort all by (score desc, ref asc).
        let mut all: Vec<(f64, &str)> = entries
            .iter()
            .map(|(r, v)| {
                let s: f64 = v
                    .values
                    .iter()
                    .zip(&qv.values)
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                (s.clamp(-1.0, 1.0), r.as_str())
            })
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        for k in [1, 3, 10] {
            let hits = index.search(&qv, k).map_err(|e| e.to_string())?;
            let got: Vec<(f64, &str)> = hits
                .iter()
                .map(|h| (h.score, h.chunk_ref.as_str()))
                .collect();
            ensure!(
                got == all[..k],
                "query {q} k={k}: {got:?} vs oracle {:?}",
                &all[..k]
            );
        }
        if all[..10].windows(2).any(|w| w[0].0 == w[1].0) {
            ties_seen += 1;
        }
    }
    ensure!(
        ties_seen > 0,
        "fixture produced no ties; tie order untested"
    );

    let bytes = index.to_bytes();
    let reloaded = VectorIndex::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure!(
        reloaded.to_bytes() == bytes,
        "serialize/reload/serialize differs"
    );
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.idx"), dir.path().join("b.idx"));
    index.save(&a).map_err(|e| e.to_string())?;
    VectorIndex::load(&a)
        .map_err(|e| e.to_string())?
        .save(&b)
        .map_err(|e| e.to_string())?;
    ensure!(
        std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(),
        "file round trip differs"
    );
    ensure!(reloaded == index, "reloaded index differs");
    Ok(format!("1000 chunks, 50 queries, k in {{1,3,10}}, {ties_seen} queries with ties; reload byte-identical"))
}

// ---------------------------------------------------------------- alpha

/// Alpha from ordered value pairs, without a coincidence matrix. Units with a
/// single value are unpairable and dropped. None when every value is equal.
fn pairwise_alpha(units: &[Vec<u8>]) -> Option<f64> {
    let units: Vec<&Vec<u8>> = units.iter().filter(|u| u.len() > 1).collect();
    let pooled: Vec<u8> = units.iter().flat_map(|u| u.iter().copied()).collect();
    let n = pooled.len() as f64;
    let mut observed = 0.0;
    for u in &units {
        let mut diff = 0usize;
        for i in 0..u.len() {
            for j in 0..u.len() {
                if i != j && u[i] != u[j] {
                    diff += 1;
                }
            }
        }
        observed += diff as f64 / (u.len() - 1) as f64;
    }
    let mut expected = 0usize;
    for i in 0..pooled.len() {
        for j in 0..pooled.len() {
            if i != j && pooled[i] != pooled[j] {
                expected += 1;
            }
        }
    }
    if expected == 0 {
        return None;
    }
    Some(1.0 - (observed / n) / (expected as f64 / (n * (n - 1.0))))
}

fn alpha_fixtures() -> Check {
    // Full agreement, several shapes.
    for units in [
        vec![vec![1, 1], vec![0, 0], vec![1, 1], vec![0, 0]],
        vec![vec![1, 1, 1], vec![2, 2, 2], vec![3, 3, 3]],
        vec![vec![0, 0], vec![1, 1, 1], vec![2, 2]],
    ] {
        let a = alpha_nominal(&units).map_err(|e| e.to_string())?;
        ensure!(a.value == 1.0, "full agreement gives {}", a.value);
    }

    // Two coders, ten items:
    //   A = 1 1 1 1 1 1 0 0 0 0
    //   B = 1 1 1 1 1 0 0 0 0 1
    // Coincidences: o11 = 10, o00 = 6, o01 = o10 = 2; n1 = 12, n0 = 8, n = 20.
    // alpha = 1 - (n - 1) * (o01 + o10) / (2 * n0 * n1) = 1 - 19 * 4 / 192.
    let expected = 116.0 / 192.0;
    let a = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
    let b = [1, 1, 1, 1, 1, 0, 0, 0, 0, 1];
    let units: Vec<Vec<i32>> = a.iter().zip(&b).map(|(x, y)| vec![*x, *y]).collect();
    let got = alpha_nominal(&units).map_err(|e| e.to_string())?.value;
    ensure!((got - expected).abs() <= 1e-9, "alpha {got} vs {expected}");

    // Same fixture through annotation records.
    let records: Vec<AnnotationRecord> = units
        .iter()
        .enumerate()
        .flat_map(|(i, u)| {
            u.iter().enumerate().map(move |(c, v)| AnnotationRecord {
                sample_id: format!("s{i:02}"),
                annotator_id: format!("a{c}"),
                readability: 1,
                completeness_strict: *v as u8,
                completeness_relaxed: 1,
                correctness_strict: 1,
                correctness_relaxed: 1,
            })
        })
        .collect();
    let via_records = krippendorff_alpha_nominal(&records, ManualCriterion::CompletenessStrict)
        .map_err(|e| e.to_string())?
        .value;
    ensure!(
        (via_records - expected).abs() <= 1e-9,
        "record path gives {via_records}"
    );

    // Relabeling categories leaves alpha unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for case in 0..100 {
        let n_units = rng.random_range(3..15);
        let units: Vec<Vec<u8>> = (0..n_units)
            .map(|_| {
                (0..rng.random_range(1..5))
                    .map(|_| rng.random_range(0..4u8))
                    .collect()
            })
            .collect();
        let Ok(base) = alpha_nominal(&units) else {
            continue;
        };
        let mut labels: Vec<&str> = vec!["rouge", "vert", "bleu", "noir"];
        labels.shuffle(&mut rng);
        let renamed: Vec<Vec<&str>> = units
            .iter()
            .map(|u| u.iter().map(|v| labels[*v as usize]).collect())
            .collect();
        let other = alpha_nominal(&renamed).map_err(|e| e.to_string())?;
        ensure!(
            (base.value - other.value).abs() <= 1e-12,
            "case {case}: relabeling {} -> {}",
            base.value,
            other.value
        );
        if let Some(want) = pairwise_alpha(&units) {
            ensure!(
                (base.value - want).abs() <= 1e-9,
                "case {case}: alpha {} vs pairwise oracle {want}",
                base.value
            );
            checked += 1;
        }
    }
    ensure!(checked > 50, "only {checked} non-degenerate cases");
    Ok(format!(
        "full agreement 1.0; fixture {got:.12} (= 116/192); relabel-invariant and pairwise oracle over {checked} cases"
    ))
}

// ---------------------------------------------------------------- end to end

fn run_pipeline(dir: &Path) -> Result<PathBuf, String> {
    let cfg = common::workspace(
        dir,
        20,
        &["mock-a", "mock-b"],
        "\n[generation]\nbudgets = [25]\n",
    );
    let loaded = LoadedConfig::load(&cfg).map_err(|e| e.to_string())?;
    let mut p = Pipeline::open(loaded, false).map_err(|e| e.to_string())?;
    p.ingest().map_err(|e| e.to_string())?;
    p.split().map_err(|e| e.to_string())?;
    p.index().map_err(|e| e.to_string())?;
    p.run(None).map_err(|e| e.to_string())?;
    p.eval().map_err(|e| e.to_string())?;
    p.report().map_err(|e| e.to_string())?;
    Ok(p.output_dir().to_path_buf())
}

fn is_cell(s: &str) -> bool {
    // m.mm_{s.ss}
    let Some((m, rest)) = s.split_once("_{") else {
        return false;
    };
    let Some(sd) = rest.strip_suffix('}') else {
        return false;
    };
    let two_dp = |x: &str| {
        x.split_once('.').is_some_and(|(i, f)| {
            !i.is_empty()
                && i.chars().all(|c| c.is_ascii_digit())
                && f.len() == 2
                && f.chars().all(|c| c.is_ascii_digit())
        })
    };
    two_dp(m) && two_dp(sd)
}

fn end_to_end() -> Check {
    let t = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out_a = run_pipeline(a.path())?;
    let elapsed = t.elapsed();
    let out_b = run_pipeline(b.path())?;

    let report = std::fs::read_to_string(out_a.join("report.txt")).map_err(|e| e.to_string())?;
    let rows: Vec<&str> = report.lines().skip(2).collect();
    ensure!(
        rows.len() == 4,
        "report has {} configuration rows",
        rows.len()
    );
    let mut cells = 0;
    for row in &rows {
        let fields: Vec<&str> = row.split_whitespace().collect();
        ensure!(fields[1] == "20", "row {row:?} is not over 20 terms");
        for f in &fields[2..] {
            if *f != "-" {
                ensure!(is_cell(f), "cell {f:?} is not m.mm_{{s.ss}}");
                cells += 1;
            }
        }
    }
    ensure!(
        cells == 4 * MetricKind::LEXICAL.len(),
        "{cells} metric cells"
    );

    let ha = std::fs::read_to_string(out_a.join("manifest.json")).unwrap();
    let hb = std::fs::read_to_string(out_b.join("manifest.json")).unwrap();
    let hash =
        |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap()["config_hash"].clone();
    ensure!(hash(&ha) == hash(&hb), "config hashes differ");
    let (ta, tb) = (common::tree_bytes(&out_a), common::tree_bytes(&out_b));
    ensure!(ta.len() == tb.len(), "artifact sets differ");
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        ensure!(pa == pb && ba == bb, "artifact {pa} differs between runs");
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "20 terms x 4 configurations, {cells} cells, {} artifacts byte-identical, {:.2}s",
        ta.len(),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- campaign

fn campaign_sampling() -> Check {
    let backends: Vec<BackendConfig> = ["m1", "m2", "m3"]
        .iter()
        .map(|m| BackendConfig::mock(m))
        .collect();
    let encoders: Vec<String> = ["e1", "e2", "e3"].iter().map(|s| s.to_string()).collect();
    let configs =
        enumerate_configurations(&backends, &[Mode::BaseSlm, Mode::Rag], &encoders, &[25, 50]);
    ensure!(configs.len() == 24, "{} configurations", configs.len());
    let mut runs = Vec::new();
    for c in &configs {
        for i in 0..50 {
            let term = format!("terme{i:02}");
            let mut r = mock_run(&c.id(), &term, &format!("sortie {term}"));
            r.query_id = c.query_id(&term);
            r.mode = c.mode;
            r.max_tokens = c.max_tokens;
            r.encoder_name = c.encoder_name.clone();
            runs.push(r);
        }
    }
    let a = sample_campaign(&runs, 50, 13).map_err(|e| e.to_string())?;
    let b = sample_campaign(&runs, 50, 13).map_err(|e| e.to_string())?;
    ensure!(a.samples.len() == 1200, "{} samples", a.samples.len());
    ensure!(a == b, "sampling is not deterministic under a fixed seed");
    let ids: BTreeSet<&str> = a.samples.iter().map(|s| s.sample_id.as_str()).collect();
    ensure!(ids.len() == 1200, "sample ids collide");
    let mut per: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &a.samples {
        *per.entry(s.config_id.as_str()).or_default() += 1;
    }
    ensure!(
        per.len() == 24 && per.values().all(|&n| n == 50),
        "uneven per-configuration draw"
    );
    Ok("24 configurations x 50 = 1200 samples, identical under seed".into())
}

// ---------------------------------------------------------------- scale

fn scale_reference() -> Check {
    let path = refomed_path().ok_or("skipped: needs REFOMED_PATH and network access")?;
    let records = load_refomed(&path)?;
    let split = split_by_term(&records, SplitRatios::new(0.6, 0.2, 0.2).unwrap(), 13)
        .map_err(|e| e.to_string())?;
    let terms: Vec<String> = split
        .get(Split::Test)
        .iter()
        .map(|r| r.term.clone())
        .collect();
    let client = HttpWikiClient::new(HttpWikiConfig::default());
    client
        .search("fr", "médecine", 1)
        .map_err(|e| format!("skipped: network unavailable ({e})"))?;
    let params = KbParams::default();
    let kb = build_kb(&terms, &client, &params).map_err(|e| e.to_string())?;
    let mut per_term: HashMap<&str, usize> = HashMap::new();
    for d in &kb.documents {
        *per_term.entry(d.term.as_str()).or_default() += 1;
        ensure!(
            d.lines.len() <= params.line_limit,
            "{} has {} lines",
            d.page_title,
            d.lines.len()
        );
    }
    ensure!(
        per_term.values().all(|&n| n <= params.top_n),
        "a term exceeds top_n documents"
    );
    let tokens: usize = kb
        .documents
        .iter()
        .flat_map(|d| &d.lines)
        .map(|l| prage::metrics::tokenize(l).len())
        .sum();
    Ok(format!(
        "{} terms: {} documents, {} lines, {} tokens (historical: 20,402 sentences, 1,708,034 tokens)",
        terms.len(),
        kb.documents.len(),
        kb.line_count(),
        tokens
    ))
}

// ---------------------------------------------------------------- harness

struct Criterion {
    name: &'static str,
    gating: bool,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion {
            name: "dataset split",
            gating: true,
            run: dataset_split,
        },
        Criterion {
            name: "length statistics",
            gating: true,
            run: length_statistics,
        },
        Criterion {
            name: "metric oracles",
            gating: true,
            run: metric_oracles,
        },
        Criterion {
            name: "best-reference aggregation",
            gating: true,
            run: ragrefs_oracle,
        },
        Criterion {
            name: "retrieval exactness",
            gating: true,
            run: retrieval_exactness,
        },
        Criterion {
            name: "krippendorff alpha",
            gating: true,
            run: alpha_fixtures,
        },
        Criterion {
            name: "end-to-end on fixtures",
            gating: true,
            run: end_to_end,
        },
        Criterion {
            name: "campaign sampling",
            gating: true,
            run: campaign_sampling,
        },
        Criterion {
            name: "scale reference",
            gating: false,
            run: scale_reference,
        },
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let (mut failed, mut blocked) = (0, 0);
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match (&outcome, c.gating) {
            (Ok(d), _) => ("PASS", d.clone()),
            (Err(e), true) => {
                // Blocked criteria still print FAIL; only regressions fail the target.
                if e.starts_with("blocked:") {
                    blocked += 1;
                } else {
                    failed += 1;
                }
                ("FAIL", e.clone())
            }
            (Err(e), false) => ("INFO", e.clone()),
        };
        let kind = if c.gating { "" } else { " (non-gating)" };
        println!("acceptance {tag} {}{kind}: {detail}", c.name);
    }
    if blocked > 0 {
        println!("acceptance: {blocked} gating criteria blocked by missing external data");
    }
    if failed > 0 {
        println!("acceptance: {failed} gating criteria failed");
        std::process::exit(1);
    }
}
