//! Critic heads on top of the LM backbone: ILQL's Q and V heads and the PPO
//! value head. Each is a one-hidden-layer MLP whose output layer starts at
//! zero.

use rand::Rng;

use super::decode::NextToken;
use super::PolicyModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct Head<T: Scalar> {
    pub store: ParamStore<T>,
    pub out: usize,
}

impl<T: Scalar> Head<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        store.normal("fc1.w", &[input, hidden], 1.0 / (input as f64).sqrt(), rng);
        store.zeros("fc1.b", &[hidden]);
        store.zeros("fc2.w", &[hidden, out]);
        store.zeros("fc2.b", &[out]);
        Self { store, out }
    }

    pub fn from_store(store: ParamStore<T>) -> Result<Self> {
        let out = store.index_of("fc2.b").map(|i| store.get(i).values.len()).ok_or(Error::Invalid("head lacks fc2.b".into()))?;
        if store.len() != 4 {
            return Err(Error::Invalid("head must have exactly 4 parameters".into()));
        }
        Ok(Self { store, out })
    }

    /// `[m, input] -> [m, out]`
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = &self.store;
        let (w1, b1, w2, b2) = (g.param(s, 0), g.param(s, 1), g.param(s, 2), g.param(s, 3));
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, w2)?;
        Ok(g.add_bias(o, b2)?)
    }

    /// Forward on constant inputs, returning values only.
    pub fn eval(&self, x: &[T], rows: usize) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let cols = x.len() / rows.max(1);
        let xv = g.constant(&[rows, cols], x.to_vec())?;
        let o = self.forward(&mut g, xv)?;
        Ok(g.value(o).to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct IlqlHeads<T: Scalar> {
    pub q: Head<T>,
    pub v: Head<T>,
    /// Advantage temperature of the implicit policy.
    pub eta: f64,
    /// Slow copy of `v` used for TD targets when Polyak averaging is on.
    pub target_v: Option<Head<T>>,
    /// Separate trainable copy of the backbone feeding the heads. `None`
    /// means the heads read the frozen behavior backbone.
    pub critic: Option<ParamStore<T>>,
}

impl<T: Scalar> PolicyModel<T> {
    pub fn attach_ilql<R: Rng + ?Sized>(&mut self, eta: f64, rng: &mut R) {
        let (d, h, v) = (self.config.dim, self.config.head_hidden, self.vocab_size());
        self.ilql = Some(IlqlHeads { q: Head::new(d, h, v, rng), v: Head::new(d, h, 1, rng), eta, target_v: None, critic: None });
    }

    pub fn attach_value_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.value_head = Some(Head::new(self.config.dim, self.config.head_hidden, 1, rng));
    }

    fn heads(&self) -> Result<&IlqlHeads<T>> {
        self.ilql.as_ref().ok_or(Error::MissingHead("ILQL"))
    }

    /// Hidden states the ILQL heads read: the critic copy when present.
    pub fn critic_hidden(&self, g: &mut Graph<T>, tokens: &[u32]) -> Result<Var> {
        match self.heads()?.critic.as_ref() {
            Some(store) => self.hidden_with(store, g, tokens),
            None => self.hidden(g, tokens),
        }
    }

    /// Q over the vocabulary and V for every state along `response`.
    ///
    /// Row `t` of Q belongs to the state whose prefix is `response[..t]`, the
    /// position that emits token `t`. V has one more entry than the response:
    /// the state after the final token, fixed at 0.
    pub fn ilql_values(&self, context: &[u32], response: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let heads = self.heads()?;
        let (tokens, start) = Self::layout_sequence(context, None, response);
        let mut g = Graph::new();
        let h = self.critic_hidden(&mut g, &tokens[..tokens.len() - 1])?;
        let h = g.slice_rows(h, start, start + response.len())?;
        let q = heads.q.forward(&mut g, h)?;
        let v = heads.v.forward(&mut g, h)?;
        let qs = g.value(q).chunks(self.vocab_size()).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect();
        let mut vs: Vec<f64> = g.value(v).iter().map(|x| x.as_f64()).collect();
        vs.push(0.0);
        Ok((qs, vs))
    }

    /// `log_softmax(log π_β(·|s) + η (Q(s,·) − V(s)))` at the end of `tokens`.
    pub fn implicit_policy_logits(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let heads = self.heads()?;
        let mut g = Graph::new();
        let h = self.hidden(&mut g, tokens)?;
        let last = g.slice_rows(h, tokens.len() - 1, tokens.len())?;
        let logits = self.lm_logits(&mut g, last)?;
        let lp = g.log_softmax(logits);
        let last = if heads.critic.is_some() {
            let hc = self.critic_hidden(&mut g, tokens)?;
            g.slice_rows(hc, tokens.len() - 1, tokens.len())?
        } else {
            last
        };
        let q = heads.q.forward(&mut g, last)?;
        let v = heads.v.forward(&mut g, last)?;
        let vv = g.value(v)[0].as_f64();
        let mut out: Vec<f64> = g.value(lp).iter().zip(g.value(q)).map(|(l, q)| l.as_f64() + heads.eta * (q.as_f64() - vv)).collect();
        log_softmax_in_place(&mut out);
        Ok(out)
    }
}

pub(crate) fn log_softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in x.iter_mut() {
        *v -= lse;
    }
}

/// Decoding through the ILQL implicit policy.
pub struct ImplicitPolicy<'a, T: Scalar>(pub &'a PolicyModel<T>);

impl<T: Scalar> NextToken for ImplicitPolicy<'_, T> {
    fn next_log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.0.implicit_policy_logits(tokens)
    }
}
