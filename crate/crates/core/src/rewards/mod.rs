//! Terminal rewards: similarity scores in [0, 1] and their thresholded
//! binary form.

mod external;

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{ContextResponsePair, ParaphraseTable, Vocab, EOS, PAD, SEP};
use crate::error::{Error, Result};

pub use external::ExternalScorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    ExactMatch,
    TokenF1,
    Bleu,
    ParaphraseClass,
    External,
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "exact_match" => Self::ExactMatch,
            "token_f1" => Self::TokenF1,
            "bleu" => Self::Bleu,
            "paraphrase_class" => Self::ParaphraseClass,
            "external" => Self::External,
            _ => return Err(Error::Invalid(format!("unknown scorer {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSpec {
    pub scorer: ScorerKind,
    /// Scores at or above this become a click (reward 1).
    pub click_threshold: f64,
    pub binarize: bool,
    /// Command line of the external scorer process.
    pub scorer_cmd: Option<String>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self { scorer: ScorerKind::ParaphraseClass, click_threshold: 0.6, binarize: true, scorer_cmd: None }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.click_threshold > 0.0 && self.click_threshold < 1.0) {
            errs.push(format!("click_threshold must be in (0, 1), got {}", self.click_threshold));
        }
        if self.scorer == ScorerKind::External && self.scorer_cmd.as_deref().is_none_or(|c| c.trim().is_empty()) {
            errs.push("scorer = external needs scorer_cmd".to_string());
        }
        errs
    }
}

/// A score in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(v: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&v) {
            Ok(Self(v))
        } else {
            Err(Error::RewardRange(v))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn is_control_word(w: &str) -> bool {
    w == PAD || w == EOS || w == SEP || (w.starts_with("<r") && w.ends_with('>'))
}

fn content<S: AsRef<str>>(xs: &[S]) -> Vec<&str> {
    xs.iter().map(AsRef::as_ref).filter(|w| !is_control_word(w)).collect()
}

pub fn exact_match<S: AsRef<str>, U: AsRef<str>>(generated: &[S], target: &[U]) -> f64 {
    let (g, t) = (content(generated), content(target));
    if !g.is_empty() && g == t {
        1.0
    } else {
        0.0
    }
}

fn counts<'a>(xs: &[&'a str]) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for &x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// Harmonic mean of multiset-overlap precision and recall.
pub fn token_f1<S: AsRef<str>, U: AsRef<str>>(generated: &[S], target: &[U]) -> f64 {
    let (g, t) = (content(generated), content(target));
    if g.is_empty() || t.is_empty() {
        return 0.0;
    }
    let tc = counts(&t);
    let overlap: usize = counts(&g).iter().map(|(w, &n)| n.min(tc.get(w).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / g.len() as f64;
    let r = overlap as f64 / t.len() as f64;
    2.0 * p * r / (p + r)
}

fn ngrams<'a, 'b>(xs: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    for w in xs.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU against a single reference, without smoothing.
pub fn bleu<S: AsRef<str>, U: AsRef<str>>(generated: &[S], target: &[U], max_n: usize) -> f64 {
    assert!(max_n >= 1, "max_n must be at least 1");
    let (g, t) = (content(generated), content(target));
    if g.is_empty() || t.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let total = g.len().saturating_sub(n - 1);
        if total == 0 {
            return 0.0;
        }
        let refs = ngrams(&t, n);
        let matched: usize = ngrams(&g, n).iter().map(|(k, &c)| c.min(refs.get(k).copied().unwrap_or(0))).sum();
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let (c, r) = (g.len() as f64, t.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * (log_sum / max_n as f64).exp()).clamp(0.0, 1.0)
}

/// 1 iff `score >= threshold`.
pub fn click(score: f64, threshold: f64) -> f64 {
    if score >= threshold {
        1.0
    } else {
        0.0
    }
}

pub fn paraphrase_class_reward<S: AsRef<str>>(generated: &[S], class: Option<u32>, table: &ParaphraseTable) -> Result<f64> {
    let class = class.ok_or(Error::MissingClass)?;
    let g = content(generated);
    match table.contains(class, &g) {
        Some(true) => Ok(1.0),
        Some(false) => Ok(0.0),
        None => Err(Error::Invalid(format!("paraphrase class {class} not in table"))),
    }
}

/// Scores generated responses against pairs under one [`RewardSpec`].
pub struct Rewarder {
    spec: RewardSpec,
    vocab: Vocab,
    paraphrases: Option<ParaphraseTable>,
    external: Option<Mutex<ExternalScorer>>,
}

impl std::fmt::Debug for Rewarder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rewarder").field("spec", &self.spec).finish_non_exhaustive()
    }
}

impl Rewarder {
    pub fn new(spec: RewardSpec, vocab: Vocab, paraphrases: Option<ParaphraseTable>) -> Result<Self> {
        let errs = spec.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        if spec.scorer == ScorerKind::ParaphraseClass && paraphrases.is_none() {
            return Err(Error::Invalid("paraphrase_class scorer needs a paraphrase table".into()));
        }
        let external = match (&spec.scorer, &spec.scorer_cmd) {
            (ScorerKind::External, Some(cmd)) => Some(Mutex::new(ExternalScorer::spawn(cmd)?)),
            _ => None,
        };
        Ok(Self { spec, vocab, paraphrases, external })
    }

    pub fn spec(&self) -> &RewardSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Raw similarity of a generated response to the pair's target.
    pub fn similarity(&self, generated: &[u32], pair: &ContextResponsePair) -> Result<f64> {
        let g = self.vocab.surface(generated);
        let t = self.vocab.surface(&pair.response);
        Ok(match self.spec.scorer {
            ScorerKind::ExactMatch => exact_match(&g, &t),
            ScorerKind::TokenF1 => token_f1(&g, &t),
            ScorerKind::Bleu => bleu(&g, &t, 4),
            ScorerKind::ParaphraseClass => paraphrase_class_reward(&g, pair.class, self.paraphrases.as_ref().expect("checked in new"))?,
            ScorerKind::External => self.external_batch(&[(generated.to_vec(), pair)])?[0],
        })
    }

    fn finish(&self, s: f64) -> f64 {
        if self.spec.binarize {
            click(s, self.spec.click_threshold)
        } else {
            s
        }
    }

    /// Terminal reward: the similarity, thresholded when `binarize` is set.
    pub fn reward(&self, generated: &[u32], pair: &ContextResponsePair) -> Result<f64> {
        Ok(self.finish(self.similarity(generated, pair)?))
    }

    pub fn reward_batch(&self, items: &[(Vec<u32>, &ContextResponsePair)]) -> Result<Vec<f64>> {
        if self.spec.scorer == ScorerKind::External {
            return Ok(self.external_batch(items)?.into_iter().map(|s| self.finish(s)).collect());
        }
        items.iter().map(|(g, p)| self.reward(g, p)).collect()
    }

    fn external_batch(&self, items: &[(Vec<u32>, &ContextResponsePair)]) -> Result<Vec<f64>> {
        let batch: Vec<(String, String)> = items
            .iter()
            .map(|(g, p)| (self.vocab.surface(g).join(" "), self.vocab.surface(&p.response).join(" ")))
            .collect();
        let mut scorer = self.external.as_ref().expect("external scorer spawned").lock().unwrap_or_else(|e| e.into_inner());
        scorer.score(&batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn f1_hand_counts() {
        assert_eq!(token_f1(&w("a b"), &w("a c")), 0.5);
        assert_eq!(token_f1(&w("a b"), &w("a b")), 1.0);
        assert_eq!(token_f1(&w("a b"), &w("c d")), 0.0);
        assert_eq!(token_f1(&w(""), &w("c d")), 0.0);
        assert_eq!(token_f1(&w("a <eos>"), &w("a")), 1.0);
        // repeated tokens are clipped by the reference multiset
        assert!((token_f1(&w("a a a"), &w("a b")) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&w("the cat sat on the mat"), &w("the cat sat on the mat"), 4), 1.0);
        assert_eq!(bleu(&w("the cat"), &w("the cat sat"), 4), 0.0);
        let b = bleu(&w("the cat sat on the mat"), &w("the cat sat on a mat"), 4);
        assert!((b - (1.0f64 / 12.0).powf(0.25)).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_directional() {
        let (x, y) = (w("a b c d e"), w("a b c d"));
        assert_ne!(bleu(&x, &y, 4), bleu(&y, &x, 4));
    }

    #[test]
    fn click_boundary() {
        assert_eq!(click(0.61, 0.6), 1.0);
        assert_eq!(click(0.6, 0.6), 1.0);
        assert_eq!(click(0.0, 0.6), 0.0);
    }

    #[test]
    fn threshold_validation() {
        let spec = RewardSpec { click_threshold: 1.0, scorer: ScorerKind::External, ..Default::default() };
        assert_eq!(spec.validate().len(), 2);
    }
}
