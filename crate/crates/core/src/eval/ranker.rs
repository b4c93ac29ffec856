//! Ranker mode: every method scores the same behavior-policy candidates
//! and the top-scored one is kept.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SequenceScore;
use crate::corpus::ContextResponsePair;
use crate::error::{Error, Result};
use crate::model::{argmax, sample_responses, DecodeConfig, NextToken, PolicyModel};
use crate::rewards::Rewarder;
use crate::scalar::Scalar;
use crate::seed::{rng_for, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub context_id: String,
    /// Which of the context's independent draws this is.
    pub draw: usize,
    pub context: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub rewards: Vec<f64>,
}

/// `draws` sets of `n` sampled responses per context, each scored.
#[allow(clippy::too_many_arguments)]
pub fn draw_candidates<P: NextToken + Sync + ?Sized>(
    behavior: &P,
    pairs: &[&ContextResponsePair],
    rewarder: &Rewarder,
    n: usize,
    draws: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<CandidateSet>> {
    if n == 0 || draws == 0 {
        return Err(Error::Config(vec!["ranker needs at least one candidate and one draw".into()]));
    }
    let eos = rewarder.vocab().eos();
    let jobs: Vec<(&ContextResponsePair, usize)> = pairs.iter().flat_map(|p| (0..draws).map(move |d| (*p, d))).collect();
    jobs.par_iter()
        .map(|&(pair, draw)| {
            let mut rng = rng_for(seed, &format!("{}/{draw}", pair.key()));
            let candidates = sample_responses(behavior, &pair.context, None, &DecodeConfig::sample(horizon, n), eos, &mut rng)?;
            let items: Vec<(Vec<u32>, &ContextResponsePair)> = candidates.iter().map(|c| (c.clone(), pair)).collect();
            let rewards = rewarder.reward_batch(&items)?;
            Ok(CandidateSet { context_id: pair.key(), draw, context: pair.context.clone(), candidates, rewards })
        })
        .collect()
}

/// Content hash of the candidate sets (ids, tokens, and rewards).
pub fn candidates_hash(sets: &[CandidateSet]) -> String {
    sha256_hex(&serde_json::to_vec(sets).expect("candidate sets serialize"))
}

/// Critic value of a whole response.
pub trait CriticScore: Sync {
    fn critic_score(&self, context: &[u32], response: &[u32]) -> Result<f64>;
}

impl<T: Scalar> CriticScore for PolicyModel<T> {
    /// Q of the final token at the final state. With a terminal reward this
    /// is the critic's estimate of the response's return.
    fn critic_score(&self, context: &[u32], response: &[u32]) -> Result<f64> {
        let (q, _) = self.ilql_values(context, response)?;
        let (last, row) = (response.last(), q.last());
        match (last, row) {
            (Some(&a), Some(row)) => Ok(row[a as usize]),
            _ => Err(Error::Invalid("cannot score an empty response".into())),
        }
    }
}

pub enum RankScorer<'a> {
    /// Total log-probability, optionally after a conditioning token.
    LogProb { model: &'a dyn SequenceScore, condition: Option<u32> },
    Critic(&'a dyn CriticScore),
    /// The reward itself: the best any ranker can do.
    Oracle,
    /// Independent uniform scores.
    Random { seed: u64 },
}

impl RankScorer<'_> {
    fn scores(&self, set: &CandidateSet) -> Result<Vec<f64>> {
        match self {
            RankScorer::LogProb { model, condition } => set
                .candidates
                .iter()
                .map(|c| Ok(model.token_log_probs(&set.context, *condition, c)?.iter().sum()))
                .collect(),
            RankScorer::Critic(critic) => set.candidates.iter().map(|c| critic.critic_score(&set.context, c)).collect(),
            RankScorer::Oracle => Ok(set.rewards.clone()),
            RankScorer::Random { seed } => {
                let mut rng = rng_for(*seed, &format!("{}/{}", set.context_id, set.draw));
                Ok(set.candidates.iter().map(|_| rng.random::<f64>()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerResult {
    pub method: String,
    pub seed: u64,
    /// Mean reward of the picked candidates.
    pub mean_reward: f64,
    pub sets: usize,
    pub candidates_hash: String,
    /// Picked index per set; ties go to the lowest index.
    pub picks: Vec<usize>,
}

/// Ranks every set with every method.
pub fn eval_ranker(methods: &[(&str, RankScorer<'_>)], sets: &[CandidateSet], seed: u64) -> Result<Vec<RankerResult>> {
    if sets.is_empty() {
        return Err(Error::Invalid("no candidate sets to rank".into()));
    }
    let hash = candidates_hash(sets);
    methods
        .iter()
        .map(|(name, scorer)| {
            let picks = sets.par_iter().map(|s| Ok(argmax(&scorer.scores(s)?))).collect::<Result<Vec<usize>>>()?;
            let total: f64 = sets.iter().zip(&picks).map(|(s, &i)| s.rewards[i]).sum();
            Ok(RankerResult {
                method: name.to_string(),
                seed,
                mean_reward: total / sets.len() as f64,
                sets: sets.len(),
                candidates_hash: hash.clone(),
                picks,
            })
        })
        .collect()
}
