use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::next_store_id;
use super::{Result, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Param<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// A named set of trainable tensors plus their gradient and Adam buffers.
///
/// Each store carries a process-unique id so a [`super::Graph`] can route
/// gradients back to the store its parameters were read from. Cloning a store
/// gives the clone a fresh id.
#[derive(Debug)]
pub struct ParamStore<T: Scalar> {
    uid: u64,
    params: Vec<Param<T>>,
    grads: Vec<Option<Vec<T>>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: next_store_id(),
            params: self.params.clone(),
            grads: self.grads.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
            step: self.step,
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Serializable snapshot of a store: values plus optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StoreState<T: Scalar> {
    pub params: Vec<Param<T>>,
    pub adam_m: Vec<Vec<T>>,
    pub adam_v: Vec<Vec<T>>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay per unit learning rate.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { uid: next_store_id(), params: Vec::new(), grads: Vec::new(), m: Vec::new(), v: Vec::new(), step: 0 }
    }

    pub fn from_params(params: Vec<Param<T>>) -> Self {
        let mut s = Self::new();
        for p in params {
            s.push(p);
        }
        s
    }

    pub fn state(&self) -> StoreState<T> {
        StoreState { params: self.params.clone(), adam_m: self.m.clone(), adam_v: self.v.clone(), step: self.step }
    }

    pub fn from_state(state: StoreState<T>) -> Result<Self> {
        let ok = state.adam_m.len() == state.params.len()
            && state.adam_v.len() == state.params.len()
            && state.params.iter().enumerate().all(|(i, p)| {
                p.shape.iter().product::<usize>() == p.values.len() && state.adam_m[i].len() == p.values.len() && state.adam_v[i].len() == p.values.len()
            });
        if !ok {
            return Err(TensorError::Shape { op: "from_state", lhs: vec![state.params.len()], rhs: vec![state.adam_m.len(), state.adam_v.len()] });
        }
        let n = state.params.len();
        Ok(Self { uid: next_store_id(), params: state.params, grads: vec![None; n], m: state.adam_m, v: state.adam_v, step: state.step })
    }

    /// Forgets optimizer moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        for (m, v) in self.m.iter_mut().zip(&mut self.v) {
            m.iter_mut().for_each(|x| *x = T::zero());
            v.iter_mut().for_each(|x| *x = T::zero());
        }
        self.step = 0;
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    fn push(&mut self, p: Param<T>) -> usize {
        let n = p.values.len();
        self.params.push(p);
        self.grads.push(None);
        self.m.push(vec![T::zero(); n]);
        self.v.push(vec![T::zero(); n]);
        self.params.len() - 1
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "parameter {name} has wrong element count");
        self.push(Param { name: name.to_string(), shape: shape.to_vec(), values })
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.add(name, shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> usize {
        self.add(name, shape, vec![T::one(); shape.iter().product()])
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> usize {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let values = (0..shape.iter().product()).map(|_| T::lit(dist.sample(rng))).collect();
        self.add(name, shape, values)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<T> {
        &mut self.params[index]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn grad(&self, index: usize) -> Option<&[T]> {
        self.grads[index].as_deref()
    }

    pub(crate) fn add_grad(&mut self, index: usize, g: &[T]) {
        let slot = self.grads[index].get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (d, &s) in slot.iter_mut().zip(g) {
            *d += s;
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
    }

    /// One bias-corrected Adam update at learning rate `lr`. Parameters listed
    /// in `frozen` are left untouched. Fails if no parameter received a
    /// gradient since the last [`ParamStore::zero_grad`].
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig, frozen: &[usize]) -> Result<()> {
        if self.grads.iter().enumerate().all(|(i, g)| g.is_none() || frozen.contains(&i)) {
            return Err(TensorError::NoGradients);
        }
        let mut clip = 1.0;
        if let Some(max) = cfg.clip_norm {
            let norm = self.grad_norm();
            if !norm.is_finite() {
                return Err(TensorError::NonFinite("gradient norm"));
            }
            if norm > max {
                clip = max / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
        let step_size = T::lit(lr / bc1);
        let bc2 = T::lit(bc2);
        let clip = T::lit(clip);
        let decay = T::lit(1.0 - lr * cfg.weight_decay);
        for i in 0..self.params.len() {
            if frozen.contains(&i) {
                continue;
            }
            let Some(g) = &self.grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in self.params[i].values.iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                *w = *w * decay - step_size * m[j] / ((v[j] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Copies parameter values from `other` for every name both stores share.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name && q.shape == p.shape) {
                p.values.clone_from(&src.values);
                n += 1;
            }
        }
        n
    }

    /// Polyak update `self ← (1−rate)·self + rate·other` over shared names.
    pub fn blend_from(&mut self, other: &ParamStore<T>, rate: f64) {
        let (a, b) = (T::lit(1.0 - rate), T::lit(rate));
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                for (x, &y) in p.values.iter_mut().zip(&src.values) {
                    *x = a * *x + b * y;
                }
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps, with an optional
/// linear warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base: f64,
    pub total: usize,
    pub warmup: usize,
}

impl CosineSchedule {
    pub fn new(base: f64, total: usize) -> Self {
        Self { base, total, warmup: 0 }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
