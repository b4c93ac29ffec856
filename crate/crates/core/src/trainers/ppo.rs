//! On-policy PPO with a scalar value head on the shared backbone and an
//! exact per-state KL penalty toward the frozen behavior model.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ContextResponsePair;
use crate::error::{Error, Result};
use crate::model::{sample_responses, DecodeConfig, PolicyModel};
use crate::rewards::Rewarder;
use crate::scalar::Scalar;
use crate::tensor::{AdamConfig, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Initial weight of `KL(π_θ ‖ π_β)`.
    pub kl_coef: f64,
    /// Per-token KL the coefficient is steered toward; `None` keeps it fixed.
    pub kl_target: Option<f64>,
    /// Sample count over which a full proportional correction is applied.
    pub kl_horizon: f64,
    pub value_coef: f64,
    /// Ratio clip; `None` for the plain ratio objective.
    pub clip_eps: Option<f64>,
    /// Contexts per rollout.
    pub rollout_batch: usize,
    /// Gradient steps per rollout, each over the whole rollout.
    pub ppo_epochs: usize,
    /// Number of rollouts.
    pub iterations: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub temperature: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            kl_coef: 0.2,
            kl_target: Some(0.05),
            kl_horizon: 10_000.0,
            value_coef: 2.3,
            clip_eps: Some(0.2),
            rollout_batch: 16,
            ppo_epochs: 4,
            iterations: 20,
            lr: 5e-7,
            adam: AdamConfig { beta1: 0.9, beta2: 0.95, weight_decay: 1e-6, ..AdamConfig::default() },
            temperature: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.kl_coef >= 0.0) || !(self.value_coef >= 0.0) {
            errs.push("ppo coefficients must be non-negative".into());
        }
        if let Some(t) = self.kl_target {
            if !(t > 0.0) {
                errs.push(format!("ppo.kl_target must be positive, got {t}"));
            }
        }
        if let Some(e) = self.clip_eps {
            if !(e > 0.0) {
                errs.push(format!("ppo.clip_eps must be positive, got {e}"));
            }
        }
        if self.rollout_batch == 0 || self.ppo_epochs == 0 || self.iterations == 0 {
            errs.push("ppo.rollout_batch, ppo.ppo_epochs and ppo.iterations must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) || !(self.kl_horizon > 0.0) {
            errs.push("ppo.lr, ppo.temperature and ppo.kl_horizon must be positive".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub mean_reward: f64,
    /// Mean per-token `KL(π_θ ‖ π_β)` at rollout time.
    pub kl: f64,
    /// Coefficient used for this rollout.
    pub kl_coef: f64,
    /// Largest `|ratio − 1|` seen during the first gradient step.
    pub first_epoch_ratio_dev: f64,
    pub policy_objective: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoReport {
    pub steps: Vec<PpoStats>,
    pub final_kl_coef: f64,
}

struct Rollout {
    context: Vec<u32>,
    response: Vec<u32>,
    old_logp: Vec<f64>,
    advantage: Vec<f64>,
    reward: f64,
    ref_logits: Vec<f64>,
}

fn value_head_missing() -> Error {
    Error::MissingHead("value")
}

/// Graph pieces for one sequence: response-row logits and values.
fn forward_rows<T: Scalar>(model: &PolicyModel<T>, g: &mut Graph<T>, context: &[u32], response: &[u32]) -> Result<(crate::tensor::Var, crate::tensor::Var)> {
    let head = model.value_head.as_ref().ok_or_else(value_head_missing)?;
    let (tokens, start) = PolicyModel::<T>::layout_sequence(context, None, response);
    let h = model.hidden(g, &tokens[..tokens.len() - 1])?;
    let h = g.slice_rows(h, start, start + response.len())?;
    let logits = model.lm_logits(g, h)?;
    let v = head.forward(g, h)?;
    let v = g.reshape(v, &[response.len()])?;
    Ok((logits, v))
}

fn collect<T: Scalar, R: Rng + ?Sized>(
    model: &PolicyModel<T>,
    reference: &PolicyModel<T>,
    batch: &[&ContextResponsePair],
    rewarder: &Rewarder,
    decode: &DecodeConfig,
    rng: &mut R,
) -> Result<(Vec<Rollout>, f64)> {
    let eos = rewarder.vocab().eos();
    let vocab = model.vocab_size();
    let mut responses = Vec::with_capacity(batch.len());
    for pair in batch {
        let r = sample_responses(model, &pair.context, None, decode, eos, rng)?.remove(0);
        responses.push((r, *pair));
    }
    let rewards = rewarder.reward_batch(&responses)?;
    let (mut kl_sum, mut tokens) = (0.0, 0usize);
    let mut out = Vec::with_capacity(batch.len());
    for ((response, pair), reward) in responses.into_iter().zip(rewards) {
        let mut g = Graph::new();
        let (logits, v) = forward_rows(model, &mut g, &pair.context, &response)?;
        let lp = g.log_softmax(logits);
        let lpv: Vec<f64> = g.value(lp).iter().map(|x| x.as_f64()).collect();
        let old_logp = response.iter().enumerate().map(|(i, &a)| lpv[i * vocab + a as usize]).collect();
        let advantage = g.value(v).iter().map(|x| reward - x.as_f64()).collect();
        let mut rg = Graph::new();
        let (tokens_ref, start) = PolicyModel::<T>::layout_sequence(&pair.context, None, &response);
        let h = reference.hidden(&mut rg, &tokens_ref[..tokens_ref.len() - 1])?;
        let h = rg.slice_rows(h, start, start + response.len())?;
        let rl = reference.lm_logits(&mut rg, h)?;
        let rlp = rg.log_softmax(rl);
        let ref_lp: Vec<f64> = rg.value(rlp).iter().map(|x| x.as_f64()).collect();
        for (p_row, q_row) in lpv.chunks(vocab).zip(ref_lp.chunks(vocab)) {
            kl_sum += p_row.iter().zip(q_row).map(|(p, q)| p.exp() * (p - q)).sum::<f64>();
        }
        tokens += response.len();
        out.push(Rollout { context: pair.context.clone(), response, old_logp, advantage, reward, ref_logits: ref_lp });
    }
    Ok((out, kl_sum / tokens.max(1) as f64))
}

/// One rollout from `batch` followed by `ppo_epochs` full-batch updates.
#[allow(clippy::too_many_arguments)]
pub fn ppo_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut PolicyModel<T>,
    reference: &PolicyModel<T>,
    batch: &[&ContextResponsePair],
    rewarder: &Rewarder,
    cfg: &PpoConfig,
    kl_coef: f64,
    horizon: usize,
    rng: &mut R,
) -> Result<PpoStats> {
    if model.value_head.is_none() {
        return Err(value_head_missing());
    }
    let decode = DecodeConfig { temperature: cfg.temperature, ..DecodeConfig::sample(horizon, 1) };
    let (rollouts, kl) = collect(model, reference, batch, rewarder, &decode, rng)?;
    let steps: usize = rollouts.iter().map(|r| r.response.len()).sum();
    let w = T::lit(1.0 / steps as f64);
    let vocab = model.vocab_size();
    let mut stats = PpoStats {
        mean_reward: rollouts.iter().map(|r| r.reward).sum::<f64>() / rollouts.len() as f64,
        kl,
        kl_coef,
        ..Default::default()
    };
    let eps = cfg.clip_eps.map(T::lit);
    for epoch in 0..cfg.ppo_epochs {
        model.backbone.zero_grad();
        model.value_head.as_mut().expect("checked").store.zero_grad();
        let (mut obj, mut vloss) = (0.0, 0.0);
        let mut graphs = Vec::with_capacity(rollouts.len());
        for r in &rollouts {
            let mut g = Graph::new();
            let (logits, v) = forward_rows(model, &mut g, &r.context, &r.response)?;
            let lp = g.log_softmax(logits);
            let idx: Vec<usize> = r.response.iter().map(|&a| a as usize).collect();
            let logp = g.gather(lp, &idx)?;
            if epoch == 0 {
                for (new, old) in g.value(logp).iter().zip(&r.old_logp) {
                    stats.first_epoch_ratio_dev = stats.first_epoch_ratio_dev.max(((new.as_f64() - old).exp() - 1.0).abs());
                }
            }
            let n = r.response.len();
            let weights = vec![w; n];
            let old: Vec<T> = r.old_logp.iter().map(|&x| T::lit(x)).collect();
            let adv: Vec<T> = r.advantage.iter().map(|&x| T::lit(x)).collect();
            let surr = g.clipped_surrogate(logp, &old, &adv, eps, &weights)?;
            let reference = g.constant(&[n, vocab], r.ref_logits.iter().map(|&x| T::lit(x)).collect())?;
            let kl_term = g.kl_divergence(logits, reference, &weights)?;
            let target = g.constant(&[n], vec![T::lit(r.reward); n])?;
            let vl = g.squared_error(v, target, &weights)?;
            obj += g.scalar(surr).as_f64();
            vloss += g.scalar(vl).as_f64();
            let neg = g.scale(surr, -T::one());
            let kl_scaled = g.scale(kl_term, T::lit(kl_coef));
            let vl_scaled = g.scale(vl, T::lit(cfg.value_coef));
            let loss = g.add(neg, kl_scaled)?;
            let loss = g.add(loss, vl_scaled)?;
            g.backward(loss)?;
            graphs.push(g);
        }
        for g in &graphs {
            g.accumulate_into(&mut model.backbone);
            g.accumulate_into(&mut model.value_head.as_mut().expect("checked").store);
        }
        model.backbone.adam_step(cfg.lr, &cfg.adam, &[])?;
        model.value_head.as_mut().expect("checked").store.adam_step(cfg.lr, &cfg.adam, &[])?;
        if epoch == 0 {
            stats.policy_objective = obj;
            stats.value_loss = vloss;
        }
    }
    Ok(stats)
}

/// Proportional controller: moves the coefficient toward the KL target.
pub fn adapt_kl_coef(coef: f64, kl: f64, target: f64, samples: usize, horizon: f64) -> f64 {
    let err = (kl / target - 1.0).clamp(-0.2, 0.2);
    coef * (1.0 + err * samples as f64 / horizon)
}

/// Runs `iterations` rollouts over shuffled training contexts, starting from
/// the model as given (normally a copy of the behavior model, which is also
/// passed as the KL reference).
pub fn train_ppo<T: Scalar, R: Rng + ?Sized>(
    model: &mut PolicyModel<T>,
    reference: &PolicyModel<T>,
    pairs: &[&ContextResponsePair],
    rewarder: &Rewarder,
    cfg: &PpoConfig,
    horizon: usize,
    rng: &mut R,
) -> Result<PpoReport> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if pairs.is_empty() {
        return Err(Error::Invalid("no PPO training contexts".into()));
    }
    if model.value_head.is_none() {
        model.attach_value_head(rng);
    }
    model.backbone.reset_optimizer();
    model.value_head.as_mut().expect("attached").store.reset_optimizer();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut coef = cfg.kl_coef;
    let mut report = PpoReport::default();
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.rollout_batch);
        while batch.len() < cfg.rollout_batch.min(pairs.len()) {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(pairs[order[cursor]]);
            cursor += 1;
        }
        let stats = ppo_step(model, reference, &batch, rewarder, cfg, coef, horizon, rng)?;
        log::debug!("ppo iteration {}: reward {:.3} kl {:.4} coef {:.4}", it + 1, stats.mean_reward, stats.kl, coef);
        if let Some(target) = cfg.kl_target {
            coef = adapt_kl_coef(coef, stats.kl, target, batch.len(), cfg.kl_horizon);
        }
        report.steps.push(stats);
    }
    report.final_kl_coef = coef;
    Ok(report)
}
