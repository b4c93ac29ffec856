//! Training procedures: teacher forcing and its filtered / return-conditioned
//! variants, ILQL, PPO, and the Quark collection loop.

mod dt;
mod filter;
mod ilql;
mod offline;
mod ppo;
mod quark;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ContextResponsePair;
use crate::error::{Error, Result};
use crate::model::PolicyModel;
use crate::scalar::Scalar;
use crate::tensor::{AdamConfig, CosineSchedule, Graph};

pub use dt::{dt_examples, train_dt};
pub use filter::{filter_top, quantile_threshold, quantize_return, BinQuantizer, TopFilterConfig};
pub use ilql::{ilql_loss, train_ilql, train_ilql_on, IlqlConfig, IlqlLosses, IlqlReport, IlqlTransition};
pub use offline::{
    generate_offline_dataset, load_offline_dataset, save_offline_dataset, OfflineDataset, OfflineProvenance, OfflineRecord, Source,
};
pub use ppo::{ppo_step, train_ppo, PpoConfig, PpoReport, PpoStats};
pub use quark::{quark_loop, QuarkConfig, QuarkReport};
pub use ppo::adapt_kl_coef;

/// One teacher-forcing sequence: loss is taken on `response` only.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub context: Vec<u32>,
    /// Token placed between the context and the response (DT return bins).
    pub condition: Option<u32>,
    pub response: Vec<u32>,
}

impl Example {
    pub fn from_pair(p: &ContextResponsePair) -> Self {
        Self { context: p.context.clone(), condition: None, response: p.response.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    /// Keep the parameters from the epoch with the lowest validation loss.
    pub select_best: bool,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 16, lr: 1e-4, warmup_steps: 0, adam: AdamConfig::default(), select_best: true }
    }
}

impl LmTrainConfig {
    pub fn validate(&self, name: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push(format!("{name}.epochs must be positive"));
        }
        if self.batch_size == 0 {
            errs.push(format!("{name}.batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            errs.push(format!("{name}.lr must be positive, got {}", self.lr));
        }
        errs
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token training loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept; 0 means the starting point.
    pub kept_epoch: usize,
}

/// Mean per-token response loss without updating anything.
pub fn mean_loss<T: Scalar>(model: &PolicyModel<T>, examples: &[Example]) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for ex in examples {
        let mut g = Graph::new();
        let l = model.response_loss(&mut g, &ex.context, ex.condition, &ex.response, T::one())?;
        total += g.scalar(l).as_f64();
        n += ex.response.len();
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// One optimizer step on a minibatch, loss averaged over its tokens.
fn lm_step<T: Scalar>(model: &mut PolicyModel<T>, batch: &[&Example], lr: f64, adam: &AdamConfig) -> Result<f64> {
    let tokens: usize = batch.iter().map(|e| e.response.len()).sum();
    let w = T::lit(1.0 / tokens as f64);
    model.backbone.zero_grad();
    let mut total = 0.0;
    for ex in batch {
        let mut g = Graph::new();
        let l = model.response_loss(&mut g, &ex.context, ex.condition, &ex.response, w)?;
        total += g.scalar(l).as_f64();
        g.backward(l)?;
        g.accumulate_into(&mut model.backbone);
    }
    if !total.is_finite() {
        return Err(Error::Invalid("training loss diverged".into()));
    }
    model.backbone.adam_step(lr, adam, &[])?;
    Ok(total)
}

/// Shuffled-minibatch teacher forcing with one cosine schedule spanning
/// however many epochs the caller runs.
pub struct LmTrainer<'a> {
    cfg: &'a LmTrainConfig,
    schedule: CosineSchedule,
    step: usize,
    pub report: TrainReport,
}

impl<'a> LmTrainer<'a> {
    pub fn new(cfg: &'a LmTrainConfig, total_steps: usize) -> Result<Self> {
        let errs = cfg.validate("train");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let schedule = CosineSchedule { base: cfg.lr, total: total_steps, warmup: cfg.warmup_steps };
        Ok(Self { cfg, schedule, step: 0, report: TrainReport::default() })
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.cfg.batch_size)
    }

    /// One pass over `train` in a fresh random order; returns the mean step loss.
    pub fn run_epoch<T: Scalar, R: Rng + ?Sized>(&mut self, model: &mut PolicyModel<T>, train: &[Example], rng: &mut R) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Invalid("no training examples".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = lm_step(model, &batch, self.schedule.lr(self.step), &self.cfg.adam)?;
            self.step += 1;
            self.report.step_losses.push(loss);
            sum += loss;
            count += 1;
        }
        let mean = sum / count as f64;
        self.report.epoch_train_loss.push(mean);
        Ok(mean)
    }
}

/// Teacher-forcing loop shared by TF, TF-All, TF-Top and DT: shuffled
/// minibatches, a fresh Adam with cosine decay, optional best-by-validation
/// selection.
pub fn fit_lm<T: Scalar, R: Rng + ?Sized>(
    model: &mut PolicyModel<T>,
    train: &[Example],
    val: &[Example],
    cfg: &LmTrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let total = train.len().div_ceil(cfg.batch_size.max(1)) * cfg.epochs;
    let mut trainer = LmTrainer::new(cfg, total)?;
    if train.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    model.backbone.reset_optimizer();
    let select = cfg.select_best && !val.is_empty();
    let mut best = if select { Some((mean_loss(model, val)?, model.backbone.clone(), 0)) } else { None };
    for epoch in 1..=cfg.epochs {
        let train_loss = trainer.run_epoch(model, train, rng)?;
        if !val.is_empty() {
            let v = mean_loss(model, val)?;
            trainer.report.epoch_val_loss.push(v);
            log::debug!("epoch {epoch}: train {train_loss:.4} val {v:.4}");
            if let Some((b, store, e)) = best.as_mut() {
                if v < *b {
                    *b = v;
                    *store = model.backbone.clone();
                    *e = epoch;
                }
            }
        }
    }
    let mut report = trainer.report;
    report.kept_epoch = cfg.epochs;
    if let Some((_, store, e)) = best {
        if e != cfg.epochs {
            model.backbone.copy_matching(&store);
        }
        report.kept_epoch = e;
    }
    Ok(report)
}

/// Behavior-policy training on context/response pairs.
pub fn train_tf<T: Scalar, R: Rng + ?Sized>(
    model: &mut PolicyModel<T>,
    train: &[&ContextResponsePair],
    val: &[&ContextResponsePair],
    cfg: &LmTrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let tr: Vec<Example> = train.iter().map(|p| Example::from_pair(p)).collect();
    let va: Vec<Example> = val.iter().map(|p| Example::from_pair(p)).collect();
    fit_lm(model, &tr, &va, cfg, rng)
}

/// Teacher forcing on every offline record regardless of reward.
pub fn train_tf_all<T: Scalar, R: Rng + ?Sized>(model: &mut PolicyModel<T>, data: &OfflineDataset, cfg: &LmTrainConfig, rng: &mut R) -> Result<TrainReport> {
    let ex: Vec<Example> = data.records.iter().map(OfflineRecord::example).collect();
    fit_lm(model, &ex, &[], cfg, rng)
}

/// Teacher forcing on the records whose return clears the top filter.
pub fn train_tf_top<T: Scalar, R: Rng + ?Sized>(
    model: &mut PolicyModel<T>,
    data: &OfflineDataset,
    filter: &TopFilterConfig,
    cfg: &LmTrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let top = filter_top(data, filter)?;
    train_tf_all(model, &top, cfg, rng)
}
