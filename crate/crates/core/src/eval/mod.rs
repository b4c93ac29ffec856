//! Generator and ranker evaluation, ablation sweeps, and report files.

mod ablation;
mod emit;
mod ranker;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ContextResponsePair;
use crate::error::{Error, Result};
use crate::model::{sample_responses, DecodeConfig, NextToken, PolicyModel};
use crate::rewards::{bleu, token_f1, Rewarder};
use crate::scalar::Scalar;
use crate::seed::rng_for;

pub use ablation::{ablate_alpha, ablate_threshold, data_fraction_sweep, threshold_sets, AblationCurve, AblationPoint, AblationSetup};
pub use emit::{emit_report, svg_bar_chart, svg_line_chart, RunReport, Series};
pub use ranker::{candidates_hash, draw_candidates, eval_ranker, CandidateSet, CriticScore, RankScorer, RankerResult};

/// Similarity histogram resolution: ten bins of width 0.1.
pub const HISTOGRAM_BINS: usize = 10;

/// Log-likelihood of a response, used for log-prob ranking and perplexity.
pub trait SequenceScore: Sync {
    fn token_log_probs(&self, context: &[u32], condition: Option<u32>, response: &[u32]) -> Result<Vec<f64>>;
}

impl<T: Scalar> SequenceScore for PolicyModel<T> {
    fn token_log_probs(&self, context: &[u32], condition: Option<u32>, response: &[u32]) -> Result<Vec<f64>> {
        PolicyModel::token_log_probs(self, context, condition, response)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Response horizon for decoding.
    pub horizon: usize,
    /// Longest top-k curve; 0 skips sampling entirely.
    pub k_max: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { horizon: 12, k_max: 5, seed: 0 }
    }
}

/// A policy to evaluate plus the token it is conditioned on (DT).
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub policy: &'a (dyn NextToken + Sync),
    pub condition: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub fraction: f64,
    pub contexts: usize,
    /// Mean terminal reward of the greedy response.
    pub click: f64,
    /// Mean raw similarity under the reward's scorer.
    pub similarity: f64,
    pub token_f1: f64,
    pub bleu: f64,
    /// Perplexity of the greedy responses under the reference model.
    pub perplexity: Option<f64>,
    /// Share of greedy responses per similarity bin.
    pub histogram: Vec<f64>,
    /// Mean best-of-k reward over sampled responses, k = 1..=k_max.
    pub top_k: Vec<f64>,
}

pub fn histogram_bin(score: f64) -> usize {
    ((score * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

struct ContextResult {
    click: f64,
    similarity: f64,
    f1: f64,
    bleu: f64,
    response: Vec<u32>,
    best_of: Vec<f64>,
}

fn eval_context(gen: Generator<'_>, pair: &ContextResponsePair, rewarder: &Rewarder, cfg: &EvalConfig) -> Result<ContextResult> {
    let eos = rewarder.vocab().eos();
    let mut rng = rng_for(cfg.seed, &pair.key());
    let response = sample_responses(gen.policy, &pair.context, gen.condition, &DecodeConfig::greedy(cfg.horizon), eos, &mut rng)?.remove(0);
    let similarity = rewarder.similarity(&response, pair)?;
    let click = rewarder.reward(&response, pair)?;
    let (g, t) = (rewarder.vocab().surface(&response), rewarder.vocab().surface(&pair.response));
    let mut best_of = Vec::with_capacity(cfg.k_max);
    if cfg.k_max > 0 {
        let samples = sample_responses(gen.policy, &pair.context, gen.condition, &DecodeConfig::sample(cfg.horizon, cfg.k_max), eos, &mut rng)?;
        let items: Vec<(Vec<u32>, &ContextResponsePair)> = samples.into_iter().map(|s| (s, pair)).collect();
        let mut best = f64::NEG_INFINITY;
        for r in rewarder.reward_batch(&items)? {
            best = best.max(r);
            best_of.push(best);
        }
    }
    Ok(ContextResult { click, similarity, f1: token_f1(&g, &t), bleu: bleu(&g, &t, 4), response, best_of })
}

/// Greedy metrics, similarity histogram and sampled top-k curve over
/// `pairs`. Each context draws from its own generator seeded by
/// `cfg.seed` and the context key, so results do not depend on evaluation
/// order or thread count.
pub fn eval_generation(
    method: &str,
    gen: Generator<'_>,
    pairs: &[&ContextResponsePair],
    rewarder: &Rewarder,
    reference: Option<&dyn SequenceScore>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no evaluation contexts".into()));
    }
    if cfg.horizon == 0 {
        return Err(Error::Config(vec!["eval horizon must be positive".into()]));
    }
    let results = pairs.par_iter().map(|p| eval_context(gen, p, rewarder, cfg)).collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let mean = |f: fn(&ContextResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for r in &results {
        counts[histogram_bin(r.similarity)] += 1;
    }
    let histogram = counts.iter().map(|&c| c as f64 / n).collect();
    let top_k = (0..cfg.k_max).map(|k| results.iter().map(|r| r.best_of[k]).sum::<f64>() / n).collect();
    let perplexity = match reference {
        Some(model) => {
            let (mut nll, mut tokens) = (0.0, 0usize);
            for (p, r) in pairs.iter().zip(&results) {
                let lps = model.token_log_probs(&p.context, None, &r.response)?;
                nll -= lps.iter().sum::<f64>();
                tokens += lps.len();
            }
            Some((nll / tokens.max(1) as f64).exp())
        }
        None => None,
    };
    Ok(EvalReport {
        method: method.to_string(),
        seed: cfg.seed,
        fraction: 1.0,
        contexts: results.len(),
        click: mean(|r| r.click),
        similarity: mean(|r| r.similarity),
        token_f1: mean(|r| r.f1),
        bleu: mean(|r| r.bleu),
        perplexity,
        histogram,
        top_k,
    })
}
