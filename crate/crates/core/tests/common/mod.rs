//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use offrl_core::corpus::{ContextResponsePair, Speaker, Vocab};
use offrl_core::model::{CausalLMConfig, PolicyModel};
use offrl_core::pipeline::RunConfig;
use offrl_core::rewards::{RewardSpec, Rewarder, ScorerKind};
use rand::SeedableRng;
use std::path::Path;
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 6] = ["ask", "bye", "hello", "no", "ok", "yes"];

pub fn vocab() -> Vocab {
    Vocab::from_surface(WORDS, 2).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `[CUS] ctx.. [REP] <sep>` / `resp.. <eos>`.
pub fn pair(vocab: &Vocab, id: &str, ctx: &str, resp: &str) -> ContextResponsePair {
    let mut context = vec![vocab.speaker_tag(Speaker::User)];
    context.extend(vocab.tokenize(ctx).unwrap());
    context.push(vocab.speaker_tag(Speaker::System));
    context.push(vocab.sep());
    let mut response = vocab.tokenize(resp).unwrap();
    response.push(vocab.eos());
    ContextResponsePair { conversation: id.into(), turn: 1, context, response, class: None }
}

pub fn tiny_config() -> CausalLMConfig {
    CausalLMConfig { dim: 16, layers: 1, heads: 2, head_hidden: 16, block: 16, ..CausalLMConfig::default() }
}

pub fn model64(vocab: &Vocab, seed: u64) -> PolicyModel<f64> {
    PolicyModel::new(tiny_config(), vocab.len(), &mut rng(seed)).unwrap()
}

pub fn exact_rewarder(vocab: &Vocab) -> Rewarder {
    Rewarder::new(RewardSpec { scorer: ScorerKind::ExactMatch, ..RewardSpec::default() }, vocab.clone(), None).unwrap()
}

pub fn max_param_diff(a: &PolicyModel<f64>, b: &PolicyModel<f64>) -> f64 {
    a.backbone
        .params()
        .iter()
        .zip(b.backbone.params())
        .flat_map(|(x, y)| x.values.iter().zip(&y.values).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// A full run small enough to finish in seconds.
pub fn tiny_run_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = 7;
    c.out = out.to_path_buf();
    c.corpus.synthetic.num_conversations = 60;
    c.behavior.epochs = 2;
    for t in [&mut c.tf_all, &mut c.tf_top.train, &mut c.dt] {
        t.epochs = 1;
    }
    c.ilql.epochs = 1;
    c.ppo.iterations = 2;
    c.quark.epochs = 2;
    c.quark.collect_per_epoch = 10;
    c.eval.reference.epochs = 1;
    c.eval.k_max = 3;
    c.ablation.quantiles = vec![0.0, 1.0];
    c.ablation.alphas = vec![0.05];
    c.ablation.fractions = vec![0.5];
    c
}
