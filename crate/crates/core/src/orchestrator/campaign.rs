//! Sampling generated outputs for blind human evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{render_prompt, FinishReason, GenerationRun, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignSample {
    /// Opaque; reveals nothing about the configuration.
    pub sample_id: String,
    pub term: String,
    /// The question as annotators see it: the base prompt for the term,
    /// whatever the generation mode was.
    pub prompt_shown: String,
    pub output_text: String,
    // Hidden from annotators.
    pub config_id: String,
    pub query_id: String,
    pub max_tokens: u32,
    /// Agreement block label.
    pub block: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CampaignSampling {
    pub samples: Vec<CampaignSample>,
    pub warnings: Vec<String>,
}

pub fn sample_campaign(
    runs: &[GenerationRun],
    n_per_config: usize,
    seed: u64,
) -> Result<CampaignSampling> {
    sample_campaign_with(runs, n_per_config, seed, &PromptTemplate::base_fr())
}

fn sample_id(seed: u64, query_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_id.as_bytes());
    format!("s{}", &hex::encode(h.finalize())[..12])
}

/// Draws up to `n_per_config` runs per configuration. All configurations
/// draw from one seeded term order, so configurations sharing terms are
/// sampled on the same terms. Failed runs are never sampled. The result is
/// shuffled for presentation.
pub fn sample_campaign_with(
    runs: &[GenerationRun],
    n_per_config: usize,
    seed: u64,
    shown: &PromptTemplate,
) -> Result<CampaignSampling> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to sample from".into()));
    }
    if n_per_config == 0 {
        return Err(Error::InvalidArgument("n_per_config must be > 0".into()));
    }
    let mut warnings = Vec::new();
    let mut by_config: BTreeMap<&str, BTreeMap<&str, &GenerationRun>> = BTreeMap::new();
    let mut failed = 0;
    for run in runs {
        by_config.entry(run.config_id.as_str()).or_default();
        if run.finish_reason == FinishReason::Error {
            failed += 1;
            continue;
        }
        let slot = by_config
            .get_mut(run.config_id.as_str())
            .expect("inserted above")
            .entry(run.term.as_str())
            .or_insert(run);
        if run.query_id < slot.query_id {
            *slot = run;
        }
    }
    if failed > 0 {
        warnings.push(format!("{failed} failed runs excluded from sampling"));
    }

    let mut terms: Vec<&str> = by_config
        .values()
        .flat_map(|m| m.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    terms.shuffle(&mut rng);
    let rank: HashMap<&str, usize> = terms.iter().enumerate().map(|(i, t)| (*t, i)).collect();

    let mut samples = Vec::new();
    for (config, by_term) in &by_config {
        let mut chosen: Vec<&GenerationRun> = by_term.values().copied().collect();
        chosen.sort_by_key(|r| rank[r.term.as_str()]);
        if chosen.len() < n_per_config {
            warnings.push(format!(
                "configuration {config} has {} usable runs, fewer than {n_per_config}",
                chosen.len()
            ));
        }
        for run in chosen.into_iter().take(n_per_config) {
            samples.push(CampaignSample {
                sample_id: sample_id(seed, &run.query_id),
                term: run.term.clone(),
                prompt_shown: render_prompt(shown, &run.term, None, None)?.text,
                output_text: run.output_text.clone(),
                config_id: run.config_id.clone(),
                query_id: run.query_id.clone(),
                max_tokens: run.max_tokens,
                block: run.max_tokens.to_string(),
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "no usable runs to sample from".into(),
        ));
    }
    samples.shuffle(&mut rng);
    for w in &warnings {
        tracing::warn!("{w}");
    }
    Ok(CampaignSampling { samples, warnings })
}

pub fn read_campaign(path: &Path) -> Result<Vec<CampaignSample>> {
    super::read_jsonl(path)
}
