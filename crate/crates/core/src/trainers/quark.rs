//! Iterated return-conditioned training: each epoch samples new responses
//! from the current policy conditioned on the top bin, scores them, adds
//! them to the pool, and trains one more pass on the grown pool.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dt::dt_examples;
use super::filter::BinQuantizer;
use super::offline::{OfflineDataset, OfflineRecord, Source};
use super::{LmTrainConfig, LmTrainer, TrainReport};
use crate::corpus::{ContextResponsePair, Vocab};
use crate::error::{Error, Result};
use crate::model::{sample_responses, DecodeConfig, PolicyModel};
use crate::rewards::Rewarder;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuarkConfig {
    pub epochs: usize,
    pub collect_per_epoch: usize,
    /// Settings of the training pass; its `epochs` is the number of passes
    /// per collection round.
    pub train: LmTrainConfig,
}

impl Default for QuarkConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            collect_per_epoch: 100,
            train: LmTrainConfig { epochs: 1, batch_size: 32, lr: 5e-5, select_best: false, ..LmTrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuarkReport {
    /// Pool size after each collection round.
    pub dataset_sizes: Vec<usize>,
    /// Mean reward of each round's fresh samples (0 when nothing was collected).
    pub collected_reward: Vec<f64>,
    pub train: TrainReport,
}

/// Runs the loop, returning the report and the final pool. Collection and
/// training draw from separate generators, so a loop that collects nothing
/// trains exactly like plain DT on the initial pool.
#[allow(clippy::too_many_arguments)]
pub fn quark_loop<T: Scalar, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    model: &mut PolicyModel<T>,
    pairs: &[&ContextResponsePair],
    rewarder: &Rewarder,
    quantizer: &BinQuantizer,
    initial: &OfflineDataset,
    cfg: &QuarkConfig,
    horizon: usize,
    collect_rng: &mut R1,
    train_rng: &mut R2,
) -> Result<(QuarkReport, OfflineDataset)> {
    if cfg.epochs == 0 {
        return Err(Error::Config(vec!["quark.epochs must be positive".into()]));
    }
    if cfg.collect_per_epoch > 0 && pairs.is_empty() {
        return Err(Error::Invalid("quark collection needs contexts".into()));
    }
    let vocab: &Vocab = rewarder.vocab();
    let eos = vocab.eos();
    let top = Some(vocab.bin_token(quantizer.top()));
    let decode = DecodeConfig::sample(horizon, 1);
    let total_steps: usize = (1..=cfg.epochs)
        .map(|e| (initial.len() + e * cfg.collect_per_epoch).div_ceil(cfg.train.batch_size.max(1)) * cfg.train.epochs)
        .sum();
    let mut trainer = LmTrainer::new(&cfg.train, total_steps)?;
    model.backbone.reset_optimizer();
    let mut pool = initial.clone();
    let mut next_index: HashMap<String, usize> = HashMap::new();
    for r in &pool.records {
        let e = next_index.entry(r.context_id.clone()).or_insert(0);
        *e = (*e).max(r.sample_index + 1);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut report = QuarkReport::default();
    for epoch in 0..cfg.epochs {
        let mut items = Vec::with_capacity(cfg.collect_per_epoch);
        for _ in 0..cfg.collect_per_epoch {
            if cursor == order.len() {
                order.shuffle(collect_rng);
                cursor = 0;
            }
            let pair = pairs[order[cursor]];
            cursor += 1;
            let r = sample_responses(&*model, &pair.context, top, &decode, eos, collect_rng)?.remove(0);
            items.push((r, pair));
        }
        let rewards = rewarder.reward_batch(&items)?;
        let mean = if rewards.is_empty() { 0.0 } else { rewards.iter().sum::<f64>() / rewards.len() as f64 };
        for ((response, pair), reward) in items.into_iter().zip(rewards) {
            let key = pair.key();
            let idx = next_index.entry(key.clone()).or_insert(1);
            let sample_index = *idx;
            *idx += 1;
            let truncated = response.last() != Some(&eos);
            pool.records.push(OfflineRecord { context_id: key, context: pair.context.clone(), response, reward, source: Source::Model, sample_index, truncated });
        }
        pool.sort();
        report.dataset_sizes.push(pool.len());
        report.collected_reward.push(mean);
        let examples = dt_examples(&pool, quantizer, vocab)?;
        for _ in 0..cfg.train.epochs {
            trainer.run_epoch(model, &examples, train_rng)?;
        }
        log::debug!("quark epoch {}: pool {} collected reward {mean:.3}", epoch + 1, pool.len());
    }
    report.train = trainer.report;
    Ok((report, pool))
}
