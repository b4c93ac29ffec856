//! Small causal language model used as both behavior and learned policy.

mod checkpoint;
mod config;
mod decode;
mod heads;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{BackboneKind, CausalLMConfig};
pub use decode::{argmax, sample_responses, DecodeConfig, DecodeMode, NextToken};
pub use heads::{Head, IlqlHeads, ImplicitPolicy};

struct AttnLayer {
    ln1: (usize, usize),
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

struct GruLayer {
    w: [usize; 3],
    u: [usize; 3],
    b: [usize; 3],
}

enum Layers {
    Attention(Vec<AttnLayer>),
    Gru(Vec<GruLayer>),
}

struct Layout {
    tok: usize,
    pos: Option<usize>,
    layers: Layers,
    lnf: (usize, usize),
    lm: (usize, usize),
}

fn layout_of<T: Scalar>(config: &CausalLMConfig, s: &ParamStore<T>) -> Result<Layout> {
    let ix = |name: String| s.index_of(&name).ok_or(Error::Invalid(format!("checkpoint lacks parameter {name}")));
    let layers = match config.backbone {
        BackboneKind::Transformer => Layers::Attention(
            (0..config.layers)
                .map(|l| {
                    Ok(AttnLayer {
                        ln1: (ix(format!("l{l}.ln1.g"))?, ix(format!("l{l}.ln1.b"))?),
                        wq: ix(format!("l{l}.wq"))?,
                        wk: ix(format!("l{l}.wk"))?,
                        wv: ix(format!("l{l}.wv"))?,
                        wo: ix(format!("l{l}.wo"))?,
                        bo: ix(format!("l{l}.bo"))?,
                        ln2: (ix(format!("l{l}.ln2.g"))?, ix(format!("l{l}.ln2.b"))?),
                        fc1: (ix(format!("l{l}.fc1.w"))?, ix(format!("l{l}.fc1.b"))?),
                        fc2: (ix(format!("l{l}.fc2.w"))?, ix(format!("l{l}.fc2.b"))?),
                    })
                })
                .collect::<Result<_>>()?,
        ),
        BackboneKind::Gru => Layers::Gru(
            (0..config.layers)
                .map(|l| {
                    let g = |k: &str| ix(format!("g{l}.{k}"));
                    Ok(GruLayer { w: [g("wz")?, g("wr")?, g("wn")?], u: [g("uz")?, g("ur")?, g("un")?], b: [g("bz")?, g("br")?, g("bn")?] })
                })
                .collect::<Result<_>>()?,
        ),
    };
    Ok(Layout {
        tok: ix("tok_emb".into())?,
        pos: match config.backbone {
            BackboneKind::Transformer => Some(ix("pos_emb".into())?),
            BackboneKind::Gru => None,
        },
        layers,
        lnf: (ix("lnf.g".into())?, ix("lnf.b".into())?),
        lm: (ix("lm.w".into())?, ix("lm.b".into())?),
    })
}

fn init_backbone<T: Scalar, R: Rng + ?Sized>(c: &CausalLMConfig, rng: &mut R) -> ParamStore<T> {
    let (d, v) = (c.dim, c.vocab_size);
    let std = c.init_std;
    let mut s = ParamStore::new();
    s.normal("tok_emb", &[v, d], std, rng);
    match c.backbone {
        BackboneKind::Transformer => {
            s.normal("pos_emb", &[c.block, d], std, rng);
            let proj_std = std / (2.0 * c.layers as f64).sqrt();
            for l in 0..c.layers {
                s.ones(&format!("l{l}.ln1.g"), &[d]);
                s.zeros(&format!("l{l}.ln1.b"), &[d]);
                for w in ["wq", "wk", "wv"] {
                    s.normal(&format!("l{l}.{w}"), &[d, d], std, rng);
                }
                s.normal(&format!("l{l}.wo"), &[d, d], proj_std, rng);
                s.zeros(&format!("l{l}.bo"), &[d]);
                s.ones(&format!("l{l}.ln2.g"), &[d]);
                s.zeros(&format!("l{l}.ln2.b"), &[d]);
                s.normal(&format!("l{l}.fc1.w"), &[d, c.mlp_mult * d], std, rng);
                s.zeros(&format!("l{l}.fc1.b"), &[c.mlp_mult * d]);
                s.normal(&format!("l{l}.fc2.w"), &[c.mlp_mult * d, d], proj_std, rng);
                s.zeros(&format!("l{l}.fc2.b"), &[d]);
            }
        }
        BackboneKind::Gru => {
            let g = 1.0 / (d as f64).sqrt();
            for l in 0..c.layers {
                for k in ["z", "r", "n"] {
                    s.normal(&format!("g{l}.w{k}"), &[d, d], g, rng);
                    s.normal(&format!("g{l}.u{k}"), &[d, d], g, rng);
                    s.zeros(&format!("g{l}.b{k}"), &[d]);
                }
            }
        }
    }
    s.ones("lnf.g", &[d]);
    s.zeros("lnf.b", &[d]);
    if c.zero_lm_head {
        s.zeros("lm.w", &[d, v]);
    } else {
        s.normal("lm.w", &[d, v], std, rng);
    }
    s.zeros("lm.b", &[v]);
    s
}

/// Causal LM with optional ILQL heads and PPO value head.
pub struct PolicyModel<T: Scalar> {
    pub config: CausalLMConfig,
    pub backbone: ParamStore<T>,
    layout: Layout,
    pub ilql: Option<IlqlHeads<T>>,
    pub value_head: Option<Head<T>>,
}

impl<T: Scalar> Clone for PolicyModel<T> {
    fn clone(&self) -> Self {
        Self::from_parts(self.config.clone(), self.backbone.clone(), self.ilql.clone(), self.value_head.clone()).expect("layout of a valid model")
    }
}

impl<T: Scalar> std::fmt::Debug for PolicyModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyModel")
            .field("config", &self.config)
            .field("params", &self.backbone.num_scalars())
            .field("ilql", &self.ilql.is_some())
            .field("value_head", &self.value_head.is_some())
            .finish()
    }
}

impl<T: Scalar> PolicyModel<T> {
    pub fn new<R: Rng + ?Sized>(mut config: CausalLMConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        config.vocab_size = vocab_size;
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let backbone = init_backbone(&config, rng);
        Self::from_parts(config, backbone, None, None)
    }

    pub fn from_parts(config: CausalLMConfig, backbone: ParamStore<T>, ilql: Option<IlqlHeads<T>>, value_head: Option<Head<T>>) -> Result<Self> {
        let layout = layout_of(&config, &backbone)?;
        Ok(Self { config, backbone, layout, ilql, value_head })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.block {
            return Err(Error::BlockOverflow { len, block: self.config.block });
        }
        if len == 0 {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        Ok(())
    }

    /// Final hidden states `[L, dim]` for a token sequence.
    pub fn hidden(&self, g: &mut Graph<T>, tokens: &[u32]) -> Result<Var> {
        self.hidden_with(&self.backbone, g, tokens)
    }

    /// Like [`PolicyModel::hidden`] but reading weights from `s`, which must
    /// share the backbone's layout (a critic copy of it).
    pub fn hidden_with(&self, s: &ParamStore<T>, g: &mut Graph<T>, tokens: &[u32]) -> Result<Var> {
        self.check_len(tokens.len())?;
        let lay = &self.layout;
        let tok = g.param(s, lay.tok);
        let mut x = g.embed(tok, tokens)?;
        match &lay.layers {
            Layers::Attention(layers) => {
                let pos = g.param(s, lay.pos.expect("transformer has positions"));
                let ids: Vec<u32> = (0..tokens.len() as u32).collect();
                let p = g.embed(pos, &ids)?;
                x = g.add(x, p)?;
                for l in layers {
                    let (lg, lb) = (g.param(s, l.ln1.0), g.param(s, l.ln1.1));
                    let h = g.layer_norm(x, lg, lb)?;
                    let (wq, wk, wv) = (g.param(s, l.wq), g.param(s, l.wk), g.param(s, l.wv));
                    let q = g.matmul(h, wq)?;
                    let k = g.matmul(h, wk)?;
                    let v = g.matmul(h, wv)?;
                    let a = g.causal_attention(q, k, v, self.config.heads)?;
                    let (wo, bo) = (g.param(s, l.wo), g.param(s, l.bo));
                    let a = g.matmul(a, wo)?;
                    let a = g.add_bias(a, bo)?;
                    x = g.add(x, a)?;
                    let (lg, lb) = (g.param(s, l.ln2.0), g.param(s, l.ln2.1));
                    let h = g.layer_norm(x, lg, lb)?;
                    let (w1, b1, w2, b2) = (g.param(s, l.fc1.0), g.param(s, l.fc1.1), g.param(s, l.fc2.0), g.param(s, l.fc2.1));
                    let f = g.matmul(h, w1)?;
                    let f = g.add_bias(f, b1)?;
                    let f = g.gelu(f);
                    let f = g.matmul(f, w2)?;
                    let f = g.add_bias(f, b2)?;
                    x = g.add(x, f)?;
                }
            }
            Layers::Gru(layers) => {
                let d = self.config.dim;
                for l in layers {
                    let mut proj = [x; 3];
                    for k in 0..3 {
                        let (w, b) = (g.param(s, l.w[k]), g.param(s, l.b[k]));
                        let p = g.matmul(x, w)?;
                        proj[k] = g.add_bias(p, b)?;
                    }
                    let u = [g.param(s, l.u[0]), g.param(s, l.u[1]), g.param(s, l.u[2])];
                    let mut h = g.constant(&[1, d], vec![T::zero(); d])?;
                    let mut rows = Vec::with_capacity(tokens.len());
                    for t in 0..tokens.len() {
                        let xz = g.slice_rows(proj[0], t, t + 1)?;
                        let xr = g.slice_rows(proj[1], t, t + 1)?;
                        let xn = g.slice_rows(proj[2], t, t + 1)?;
                        let hz = g.matmul(h, u[0])?;
                        let z = g.add(xz, hz)?;
                        let z = g.sigmoid(z);
                        let hr = g.matmul(h, u[1])?;
                        let r = g.add(xr, hr)?;
                        let r = g.sigmoid(r);
                        let rh = g.mul(r, h)?;
                        let hn = g.matmul(rh, u[2])?;
                        let n = g.add(xn, hn)?;
                        let n = g.tanh(n);
                        let diff = g.sub(h, n)?;
                        let zd = g.mul(z, diff)?;
                        h = g.add(n, zd)?;
                        rows.push(h);
                    }
                    x = g.concat_rows(&rows)?;
                }
            }
        }
        let (fg, fb) = (g.param(s, lay.lnf.0), g.param(s, lay.lnf.1));
        Ok(g.layer_norm(x, fg, fb)?)
    }

    /// LM logits for rows of a hidden-state matrix.
    pub fn lm_logits(&self, g: &mut Graph<T>, hidden: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.backbone, self.layout.lm.0), g.param(&self.backbone, self.layout.lm.1));
        let l = g.matmul(hidden, w)?;
        Ok(g.add_bias(l, b)?)
    }

    /// Logits at every position of `context ++ prefix`; row `i` is the
    /// distribution of token `i + 1`.
    pub fn forward_logits(&self, context: &[u32], prefix: &[u32]) -> Result<Vec<Vec<f64>>> {
        let tokens: Vec<u32> = context.iter().chain(prefix).copied().collect();
        let mut g = Graph::new();
        let h = self.hidden(&mut g, &tokens)?;
        let logits = self.lm_logits(&mut g, h)?;
        Ok(g.value(logits).chunks(self.vocab_size()).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect())
    }

    /// Builds `context ++ condition ++ response` and returns the index of the
    /// row whose logits predict the first response token.
    pub fn layout_sequence(context: &[u32], condition: Option<u32>, response: &[u32]) -> (Vec<u32>, usize) {
        let mut tokens = context.to_vec();
        tokens.extend(condition);
        let start = tokens.len() - 1;
        tokens.extend_from_slice(response);
        (tokens, start)
    }

    /// Weighted next-token cross-entropy over response positions only.
    /// Context positions are never scored.
    pub fn response_loss(&self, g: &mut Graph<T>, context: &[u32], condition: Option<u32>, response: &[u32], weight: T) -> Result<Var> {
        if context.is_empty() || response.is_empty() {
            return Err(Error::Invalid("context and response must be nonempty".into()));
        }
        let (tokens, start) = Self::layout_sequence(context, condition, response);
        let h = self.hidden(g, &tokens[..tokens.len() - 1])?;
        let h = g.slice_rows(h, start, start + response.len())?;
        let logits = self.lm_logits(g, h)?;
        Ok(g.cross_entropy(logits, response, &vec![weight; response.len()])?)
    }

    /// Per-token log-probabilities of `response` given the context.
    pub fn token_log_probs(&self, context: &[u32], condition: Option<u32>, response: &[u32]) -> Result<Vec<f64>> {
        let (tokens, start) = Self::layout_sequence(context, condition, response);
        let mut g = Graph::new();
        let h = self.hidden(&mut g, &tokens[..tokens.len() - 1])?;
        let h = g.slice_rows(h, start, start + response.len())?;
        let logits = self.lm_logits(&mut g, h)?;
        let lp = g.log_softmax(logits);
        let v = self.vocab_size();
        Ok(g.value(lp).chunks(v).zip(response).map(|(row, &t)| row[t as usize].as_f64()).collect())
    }

    /// Total log-probability of the response tokens.
    pub fn log_prob(&self, context: &[u32], condition: Option<u32>, response: &[u32]) -> Result<f64> {
        Ok(self.token_log_probs(context, condition, response)?.iter().sum())
    }

    /// Log-softmax of the last position's logits.
    pub fn next_log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, tokens)?;
        let last = g.slice_rows(h, tokens.len() - 1, tokens.len())?;
        let logits = self.lm_logits(&mut g, last)?;
        let lp = g.log_softmax(logits);
        Ok(g.value(lp).iter().map(|x| x.as_f64()).collect())
    }

    /// Hidden-state values `[L * dim]` without keeping the graph around.
    pub fn hidden_values(&self, tokens: &[u32]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, tokens)?;
        Ok(g.value(h).to_vec())
    }

    /// `exp` of the mean negative log-likelihood per response token.
    pub fn perplexity<'a>(&self, pairs: impl IntoIterator<Item = (&'a [u32], &'a [u32])>) -> Result<f64> {
        let (mut nll, mut n) = (0.0, 0usize);
        for (context, response) in pairs {
            let lps = self.token_log_probs(context, None, response)?;
            nll -= lps.iter().sum::<f64>();
            n += lps.len();
        }
        if n == 0 {
            return Err(Error::Invalid("perplexity needs at least one response token".into()));
        }
        Ok((nll / n as f64).exp())
    }

    /// Copies backbone values from another model with the same layout.
    pub fn copy_backbone_from(&mut self, other: &PolicyModel<T>) {
        self.backbone.copy_matching(&other.backbone);
    }
}
