//! Response generation as a token-level decision process.
//!
//! A state is the context plus the response prefix generated so far, an
//! action is the next token, transitions append deterministically, and the
//! only reward arrives on the transition that ends the episode (EOS or the
//! horizon).

use serde::{Deserialize, Serialize};

use crate::corpus::ContextResponsePair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    /// Maximum response length in tokens, EOS included.
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { horizon: 12, gamma: 1.0 }
    }
}

impl HorizonConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.horizon == 0 {
            errs.push("horizon must be at least 1".to_string());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            errs.push(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub context: Vec<u32>,
    pub prefix: Vec<u32>,
}

impl EpisodeState {
    pub fn initial(context: Vec<u32>) -> Self {
        Self { context, prefix: Vec::new() }
    }

    pub fn t(&self) -> usize {
        self.prefix.len()
    }

    pub fn is_terminal(&self, eos: u32, horizon: usize) -> bool {
        self.prefix.last() == Some(&eos) || self.t() >= horizon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EpisodeState,
    pub action: u32,
    pub reward: f64,
    pub next: EpisodeState,
    pub done: bool,
}

/// Appends `action`; the episode ends on EOS or when the prefix reaches the
/// horizon.
pub fn step(s: &EpisodeState, action: u32, eos: u32, horizon: usize) -> Result<(EpisodeState, bool)> {
    if s.is_terminal(eos, horizon) {
        return Err(Error::Terminal);
    }
    let mut next = s.clone();
    next.prefix.push(action);
    let done = action == eos || next.t() >= horizon;
    Ok((next, done))
}

/// Replays `pair.response` as an episode whose final transition carries
/// `reward(response, pair)`.
pub fn episode_from_pair(
    pair: &ContextResponsePair,
    reward: impl FnOnce(&[u32], &ContextResponsePair) -> Result<f64>,
    eos: u32,
    horizon: usize,
) -> Result<Vec<Transition>> {
    if pair.response.len() > horizon {
        return Err(Error::Horizon { len: pair.response.len(), horizon });
    }
    let r = reward(&pair.response, pair)?;
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::RewardRange(r));
    }
    let mut state = EpisodeState::initial(pair.context.clone());
    let mut out = Vec::with_capacity(pair.response.len());
    for &a in &pair.response {
        let (next, done) = step(&state, a, eos, horizon)?;
        out.push(Transition { state, action: a, reward: if done { r } else { 0.0 }, next: next.clone(), done });
        state = next;
        if done {
            break;
        }
    }
    Ok(out)
}

/// Per-token returns of a sequence of `len` actions whose last action earns
/// `terminal`: `γ^(len-1-t) · terminal` at step `t`.
pub fn token_returns(terminal: f64, len: usize, gamma: f64) -> Vec<f64> {
    (0..len).map(|t| gamma.powi((len - 1 - t) as i32) * terminal).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnAnnotated {
    pub context: Vec<u32>,
    pub response: Vec<u32>,
    /// Sequence return (the terminal reward).
    pub ret: f64,
    pub token_returns: Vec<f64>,
}

pub fn annotate_returns(
    sequences: &[(Vec<u32>, Vec<u32>)],
    reward: impl Fn(&[u32], &[u32]) -> Result<f64>,
    gamma: f64,
) -> Result<Vec<ReturnAnnotated>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Invalid(format!("gamma must be in (0, 1], got {gamma}")));
    }
    sequences
        .iter()
        .map(|(context, response)| {
            let r = reward(context, response)?;
            Ok(ReturnAnnotated { context: context.clone(), response: response.clone(), ret: r, token_returns: token_returns(r, response.len(), gamma) })
        })
        .collect()
}
