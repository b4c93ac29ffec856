//! Implicit Q-learning heads over the behavior model: Q is fit by TD error
//! against V of the next state plus a KL pull toward the behavior logits, V
//! is fit to Q by expectile regression.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::offline::{OfflineDataset, OfflineRecord};
use crate::error::{Error, Result};
use crate::model::{Head, PolicyModel};
use crate::scalar::Scalar;
use crate::tensor::{AdamConfig, CosineSchedule, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlqlConfig {
    /// Weight of `KL(π_β ‖ π_θ)` in the Q loss.
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    /// Advantage temperature of the implicit policy.
    pub eta: f64,
    pub epochs: usize,
    /// Records per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Polyak rate of a slow target copy of V; `None` uses V directly.
    pub polyak: Option<f64>,
    /// Give the heads their own trainable copy of the backbone. The behavior
    /// backbone and its logits stay frozen either way.
    pub finetune_backbone: bool,
}

impl Default for IlqlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            tau: 0.7,
            gamma: 1.0,
            eta: 1.0,
            epochs: 5,
            batch_size: 16,
            lr: 1e-4,
            adam: AdamConfig { beta1: 0.9, beta2: 0.95, ..AdamConfig::default() },
            polyak: None,
            finetune_backbone: false,
        }
    }
}

impl IlqlConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.tau > 0.0 && self.tau < 1.0) {
            errs.push(format!("ilql.tau must be in (0, 1), got {}", self.tau));
        }
        if !(self.alpha >= 0.0) {
            errs.push(format!("ilql.alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            errs.push(format!("ilql.gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(self.eta >= 0.0) {
            errs.push(format!("ilql.eta must be non-negative, got {}", self.eta));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            errs.push("ilql.epochs and ilql.batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            errs.push(format!("ilql.lr must be positive, got {}", self.lr));
        }
        if let Some(p) = self.polyak {
            if !(p > 0.0 && p <= 1.0) {
                errs.push(format!("ilql.polyak must be in (0, 1], got {p}"));
            }
        }
        errs
    }
}

/// One offline trajectory prepared for the heads: the states along the
/// response with their frozen hidden states and behavior logits.
#[derive(Debug, Clone)]
pub struct IlqlTransition<T: Scalar> {
    pub context: Vec<u32>,
    pub actions: Vec<u32>,
    /// Per-step reward; only the last step pays.
    pub rewards: Vec<f64>,
    hidden: Vec<T>,
    behavior_logits: Vec<T>,
}

impl<T: Scalar> IlqlTransition<T> {
    pub fn new(model: &PolicyModel<T>, context: &[u32], response: &[u32], terminal_reward: f64) -> Result<Self> {
        if response.is_empty() {
            return Err(Error::Invalid("ILQL trajectory needs at least one action".into()));
        }
        let (tokens, start) = PolicyModel::<T>::layout_sequence(context, None, response);
        let mut g = Graph::new();
        let h = model.hidden(&mut g, &tokens[..tokens.len() - 1])?;
        let h = g.slice_rows(h, start, start + response.len())?;
        let logits = model.lm_logits(&mut g, h)?;
        let mut rewards = vec![0.0; response.len()];
        rewards[response.len() - 1] = terminal_reward;
        Ok(Self {
            context: context.to_vec(),
            actions: response.to_vec(),
            rewards,
            hidden: g.value(h).to_vec(),
            behavior_logits: g.value(logits).to_vec(),
        })
    }

    pub fn from_record(model: &PolicyModel<T>, r: &OfflineRecord) -> Result<Self> {
        Self::new(model, &r.context, &r.response, r.reward)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IlqlLosses {
    /// Mean squared TD error.
    pub q_loss: f64,
    /// Mean expectile loss of V.
    pub v_loss: f64,
    /// Mean `KL(π_β ‖ π_θ)` over data states (before scaling by α).
    pub kl: f64,
}

impl std::ops::AddAssign for IlqlLosses {
    fn add_assign(&mut self, o: Self) {
        self.q_loss += o.q_loss;
        self.v_loss += o.v_loss;
        self.kl += o.kl;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IlqlReport {
    pub epoch_losses: Vec<IlqlLosses>,
}

/// Builds the loss graph for one trajectory; every term is weighted by `w`.
/// Returns `(graph, total, losses)` with the weighted value of each term.
fn trajectory_graph<T: Scalar>(
    model: &PolicyModel<T>,
    tr: &IlqlTransition<T>,
    cfg: &IlqlConfig,
    w: T,
) -> Result<(Graph<T>, crate::tensor::Var, IlqlLosses)> {
    let heads = model.ilql.as_ref().ok_or(Error::MissingHead("ILQL"))?;
    let (n, d, vocab) = (tr.len(), model.dim(), model.vocab_size());
    let mut g = Graph::new();
    let h = if heads.critic.is_some() {
        let (tokens, start) = PolicyModel::<T>::layout_sequence(&tr.context, None, &tr.actions);
        let h = model.critic_hidden(&mut g, &tokens[..tokens.len() - 1])?;
        g.slice_rows(h, start, start + n)?
    } else {
        g.constant(&[n, d], tr.hidden.clone())?
    };
    let q = heads.q.forward(&mut g, h)?;
    let v = heads.v.forward(&mut g, h)?;
    let v = g.reshape(v, &[n])?;
    let idx: Vec<usize> = tr.actions.iter().map(|&a| a as usize).collect();
    let qsa = g.gather(q, &idx)?;

    let next_v: Vec<f64> = match &heads.target_v {
        Some(target) => {
            let hv = g.value(h).to_vec();
            target.eval(&hv, n)?.iter().map(|x| x.as_f64()).collect()
        }
        None => g.value(v).iter().map(|x| x.as_f64()).collect(),
    };
    let target: Vec<T> = (0..n)
        .map(|t| {
            let nv = if t + 1 < n { next_v[t + 1] } else { 0.0 };
            T::lit(tr.rewards[t] + cfg.gamma * nv)
        })
        .collect();
    let target = g.constant(&[n], target)?;
    let weights = vec![w; n];
    let td = g.squared_error(qsa, target, &weights)?;

    let q_fixed = g.detach(qsa);
    let u = g.sub(q_fixed, v)?;
    let vl = g.expectile_loss(u, T::lit(cfg.tau), &weights)?;

    let behavior = g.constant(&[n, vocab], tr.behavior_logits.clone())?;
    let shifted = g.scale(q, T::lit(heads.eta));
    let policy = g.add(behavior, shifted)?;
    let kl = g.kl_divergence(behavior, policy, &weights)?;

    let losses = IlqlLosses { q_loss: g.scalar(td).as_f64(), v_loss: g.scalar(vl).as_f64(), kl: g.scalar(kl).as_f64() };
    let kl_scaled = g.scale(kl, T::lit(cfg.alpha));
    let total = g.add(td, kl_scaled)?;
    let total = g.add(total, vl)?;
    Ok((g, total, losses))
}

/// Mean per-step losses over a batch of trajectories, without updating.
pub fn ilql_loss<T: Scalar>(model: &PolicyModel<T>, batch: &[IlqlTransition<T>], cfg: &IlqlConfig) -> Result<IlqlLosses> {
    let steps: usize = batch.iter().map(IlqlTransition::len).sum();
    let mut out = IlqlLosses::default();
    for tr in batch {
        let (_, _, l) = trajectory_graph(model, tr, cfg, T::one())?;
        out += l;
    }
    let n = steps.max(1) as f64;
    Ok(IlqlLosses { q_loss: out.q_loss / n, v_loss: out.v_loss / n, kl: out.kl / n })
}

fn ilql_step<T: Scalar>(model: &mut PolicyModel<T>, batch: &[&IlqlTransition<T>], cfg: &IlqlConfig, lr: f64) -> Result<IlqlLosses> {
    let steps: usize = batch.iter().map(|t| t.len()).sum();
    let w = T::lit(1.0 / steps as f64);
    {
        let heads = model.ilql.as_mut().ok_or(Error::MissingHead("ILQL"))?;
        heads.q.store.zero_grad();
        heads.v.store.zero_grad();
        if let Some(c) = heads.critic.as_mut() {
            c.zero_grad();
        }
    }
    let mut out = IlqlLosses::default();
    let mut graphs = Vec::with_capacity(batch.len());
    for tr in batch {
        let (mut g, total, l) = trajectory_graph(model, tr, cfg, w)?;
        g.backward(total)?;
        out += l;
        graphs.push(g);
    }
    let heads = model.ilql.as_mut().expect("checked above");
    for g in &graphs {
        g.accumulate_into(&mut heads.q.store);
        g.accumulate_into(&mut heads.v.store);
    }
    heads.q.store.adam_step(lr, &cfg.adam, &[])?;
    heads.v.store.adam_step(lr, &cfg.adam, &[])?;
    if let (Some(rate), Some(target)) = (cfg.polyak, heads.target_v.as_mut()) {
        target.store.blend_from(&heads.v.store, rate);
    }
    if let (true, Some(critic)) = (cfg.finetune_backbone, heads.critic.as_mut()) {
        for g in &graphs {
            g.accumulate_into(critic);
        }
        critic.adam_step(lr, &cfg.adam, &[])?;
    }
    // losses were built with per-step weights, so they are already means
    Ok(out)
}

/// Attaches fresh heads if needed and trains them on every record of `data`.
pub fn train_ilql<T: Scalar, R: Rng + ?Sized>(model: &mut PolicyModel<T>, data: &OfflineDataset, cfg: &IlqlConfig, rng: &mut R) -> Result<IlqlReport> {
    let trajectories = data.records.iter().map(|r| IlqlTransition::from_record(model, r)).collect::<Result<Vec<_>>>()?;
    train_ilql_on(model, &trajectories, cfg, rng)
}

/// Same as [`train_ilql`] on already prepared trajectories.
pub fn train_ilql_on<T: Scalar, R: Rng + ?Sized>(
    model: &mut PolicyModel<T>,
    trajectories: &[IlqlTransition<T>],
    cfg: &IlqlConfig,
    rng: &mut R,
) -> Result<IlqlReport> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if trajectories.is_empty() {
        return Err(Error::Invalid("no ILQL trajectories".into()));
    }
    if model.ilql.is_none() {
        model.attach_ilql(cfg.eta, rng);
    }
    let behavior = if cfg.finetune_backbone { Some(model.backbone.clone()) } else { None };
    let heads = model.ilql.as_mut().expect("attached");
    heads.eta = cfg.eta;
    if heads.critic.is_none() {
        heads.critic = behavior;
    }
    heads.q.store.reset_optimizer();
    heads.v.store.reset_optimizer();
    if let Some(c) = heads.critic.as_mut() {
        c.reset_optimizer();
    }
    match cfg.polyak {
        Some(_) if heads.target_v.is_none() => heads.target_v = Some(Head::clone(&heads.v)),
        None => heads.target_v = None,
        _ => {}
    }
    let per_epoch = trajectories.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.lr, per_epoch * cfg.epochs);
    let mut order: Vec<usize> = (0..trajectories.len()).collect();
    let mut report = IlqlReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = IlqlLosses::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&IlqlTransition<T>> = chunk.iter().map(|&i| &trajectories[i]).collect();
            let l = ilql_step(model, &batch, cfg, schedule.lr(step))?;
            step += 1;
            sum += l;
        }
        let k = per_epoch as f64;
        let mean = IlqlLosses { q_loss: sum.q_loss / k, v_loss: sum.v_loss / k, kl: sum.kl / k };
        log::debug!("ilql epoch {}: td {:.5} v {:.5} kl {:.5}", epoch + 1, mean.q_loss, mean.v_loss, mean.kl);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
