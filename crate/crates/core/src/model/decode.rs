use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PolicyModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Anything that yields next-token log-probabilities for a token sequence.
pub trait NextToken {
    fn next_log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>>;
}

impl<T: Scalar> NextToken for PolicyModel<T> {
    fn next_log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        PolicyModel::next_log_probs(self, tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    /// Keep only the k most likely tokens; 0 keeps all.
    pub top_k: usize,
    /// Horizon: maximum response length including EOS.
    pub max_len: usize,
    pub n: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { mode: DecodeMode::Greedy, temperature: 1.0, top_k: 0, max_len: 12, n: 1 }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self { mode: DecodeMode::Greedy, max_len, ..Self::default() }
    }

    pub fn sample(max_len: usize, n: usize) -> Self {
        Self { mode: DecodeMode::Sample, max_len, n, ..Self::default() }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.mode == DecodeMode::Sample && !(self.temperature > 0.0) {
            errs.push(format!("sampling temperature must be positive, got {}", self.temperature));
        }
        if self.n == 0 {
            errs.push("decode n must be at least 1".into());
        }
        if self.max_len == 0 {
            errs.push("decode max_len must be at least 1".into());
        }
        errs
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng + ?Sized>(logp: &[f64], cfg: &DecodeConfig, rng: &mut R) -> usize {
    let mut scaled: Vec<(usize, f64)> = logp.iter().map(|&l| l / cfg.temperature).enumerate().collect();
    if cfg.top_k > 0 && cfg.top_k < scaled.len() {
        scaled.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scaled.truncate(cfg.top_k);
    }
    let max = scaled.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|p| (p.1 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return scaled[k].0;
        }
    }
    scaled.last().expect("nonempty vocabulary").0
}

/// Decodes `cfg.n` responses after `context` (and the optional conditioning
/// token, which is placed after the context and is not part of the output).
/// Each response stops at EOS or after `cfg.max_len` tokens.
pub fn sample_responses<P: NextToken + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    context: &[u32],
    condition: Option<u32>,
    cfg: &DecodeConfig,
    eos: u32,
    rng: &mut R,
) -> Result<Vec<Vec<u32>>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut prompt = context.to_vec();
    prompt.extend(condition);
    let mut out: Vec<Vec<u32>> = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        if cfg.mode == DecodeMode::Greedy && i > 0 {
            out.push(out[0].clone());
            continue;
        }
        let mut tokens = prompt.clone();
        let mut response = Vec::new();
        while response.len() < cfg.max_len {
            let lp = policy.next_log_probs(&tokens)?;
            let next = match cfg.mode {
                DecodeMode::Greedy => argmax(&lp),
                DecodeMode::Sample => sample_index(&lp, cfg, rng),
            } as u32;
            tokens.push(next);
            response.push(next);
            if next == eos {
                break;
            }
        }
        out.push(response);
    }
    Ok(out)
}
