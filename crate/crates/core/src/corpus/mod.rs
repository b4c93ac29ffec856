//! Tokens, conversations, and context/response pairs.

mod jsonl;
mod synthetic;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use jsonl::{load_jsonl, save_jsonl};
pub use synthetic::{generate_synthetic_corpus, ParaphraseClass, ParaphraseTable, SyntheticCorpus, SyntheticTaskSpec};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const USER_TAG: &str = "[CUS]";
pub const SYSTEM_TAG: &str = "[REP]";

pub fn bin_token_name(k: usize) -> String {
    format!("<r{k}>")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => USER_TAG,
            Speaker::System => SYSTEM_TAG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: Vec<String>,
    /// Paraphrase class of the act this turn realizes, when known.
    pub class: Option<u32>,
}

impl Turn {
    pub fn new(speaker: Speaker, text: &str) -> Self {
        Self { speaker, text: text.split_whitespace().map(str::to_string).collect(), class: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn system_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == Speaker::System).count()
    }
}

/// Token/id bijection. Ids are laid out as PAD, EOS, SEP, the two speaker
/// tags, the K reward-bin tokens, then surface tokens in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    num_bins: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    num_bins: usize,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_tokens(f.tokens, f.num_bins)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { tokens: v.tokens, num_bins: v.num_bins }
    }
}

const FIXED_SPECIALS: usize = 5;

pub fn is_special(token: &str) -> bool {
    [PAD, EOS, SEP, USER_TAG, SYSTEM_TAG].contains(&token)
        || (token.starts_with("<r") && token.ends_with('>') && token[2..token.len() - 1].parse::<usize>().is_ok())
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, num_bins: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index, num_bins }
    }

    /// Builds a vocabulary from surface tokens directly.
    pub fn from_surface<'a>(surface: impl IntoIterator<Item = &'a str>, num_bins: usize) -> Result<Self> {
        if num_bins < 2 {
            return Err(Error::Invalid(format!("need at least 2 reward bins, got {num_bins}")));
        }
        let mut words = BTreeSet::new();
        for w in surface {
            if is_special(w) {
                return Err(Error::Invalid(format!("surface token {w:?} collides with a reserved token")));
            }
            words.insert(w.to_string());
        }
        let mut tokens: Vec<String> = [PAD, EOS, SEP, USER_TAG, SYSTEM_TAG].iter().map(|s| s.to_string()).collect();
        tokens.extend((0..num_bins).map(bin_token_name));
        tokens.extend(words);
        Ok(Self::from_tokens(tokens, num_bins))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn eos(&self) -> u32 {
        1
    }

    pub fn sep(&self) -> u32 {
        2
    }

    pub fn speaker_tag(&self, s: Speaker) -> u32 {
        match s {
            Speaker::User => 3,
            Speaker::System => 4,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn bin_token(&self, k: usize) -> u32 {
        assert!(k < self.num_bins, "bin {k} out of range");
        (FIXED_SPECIALS + k) as u32
    }

    pub fn bin_of_token(&self, id: u32) -> Option<usize> {
        let k = (id as usize).checked_sub(FIXED_SPECIALS)?;
        (k < self.num_bins).then_some(k)
    }

    /// True for tokens that carry no surface text (PAD, EOS, SEP, bins).
    /// Speaker tags are ordinary tokens and return false.
    pub fn is_control(&self, id: u32) -> bool {
        id <= 2 || self.bin_of_token(id).is_some()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<u32>> {
        words.iter().map(|w| self.id(w.as_ref()).ok_or_else(|| Error::UnknownToken(w.as_ref().to_string()))).collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.encode(&words)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string).ok_or(Error::UnknownId(i))).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }

    /// Surface words of a response: control tokens removed.
    pub fn surface(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().filter(|&&i| !self.is_control(i)).filter_map(|&i| self.token(i)).map(str::to_string).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0]);
        }
        h.update(self.num_bins.to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Vocabulary over every surface token of `corpus` plus the reserved tokens
/// and `num_bins` reward-bin tokens.
pub fn build_vocab(corpus: &[Conversation], num_bins: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Vocab::from_surface(corpus.iter().flat_map(|c| c.turns.iter()).flat_map(|t| t.text.iter().map(String::as_str)), num_bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextResponsePair {
    pub conversation: String,
    /// Index of the system turn inside its conversation.
    pub turn: usize,
    /// Speaker-tagged history ending in SEP.
    pub context: Vec<u32>,
    /// Response ids ending in EOS.
    pub response: Vec<u32>,
    pub class: Option<u32>,
}

impl ContextResponsePair {
    pub fn key(&self) -> String {
        format!("{}#{}", self.conversation, self.turn)
    }

    /// Response without its trailing EOS.
    pub fn response_body(&self) -> &[u32] {
        match self.response.split_last() {
            Some((_, body)) => body,
            None => &[],
        }
    }
}

/// One pair per system turn. The context is every earlier turn, each
/// prefixed by its speaker tag, followed by the system tag; that history is
/// cut from the left to `max_context_len` tokens and then SEP is appended.
pub fn pairs_from_conversations(corpus: &[Conversation], vocab: &Vocab, max_context_len: usize) -> Result<Vec<ContextResponsePair>> {
    if max_context_len == 0 {
        return Err(Error::Invalid("max_context_len must be at least 1".into()));
    }
    let mut pairs = Vec::new();
    for conv in corpus {
        let mut history: Vec<u32> = Vec::new();
        for (i, turn) in conv.turns.iter().enumerate() {
            let ids = vocab.encode(&turn.text)?;
            if turn.speaker == Speaker::System {
                let mut ctx = history.clone();
                ctx.push(vocab.speaker_tag(Speaker::System));
                let start = ctx.len().saturating_sub(max_context_len);
                let mut context = ctx[start..].to_vec();
                context.push(vocab.sep());
                let mut response = ids.clone();
                response.push(vocab.eos());
                pairs.push(ContextResponsePair { conversation: conv.id.clone(), turn: i, context, response, class: turn.class });
            }
            history.push(vocab.speaker_tag(turn.speaker));
            history.extend(ids);
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 80/10/10 assignment by hashing the conversation id with the seed.
pub fn split_of(seed: u64, conversation_id: &str) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(conversation_id.as_bytes());
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    match x % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

pub fn filter_split<'a>(pairs: &'a [ContextResponsePair], seed: u64, split: Split) -> Vec<&'a ContextResponsePair> {
    pairs.iter().filter(|p| split_of(seed, &p.conversation) == split).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(id: &str, turns: &[(Speaker, &str)]) -> Conversation {
        Conversation { id: id.into(), turns: turns.iter().map(|&(s, t)| Turn::new(s, t)).collect() }
    }

    #[test]
    fn vocab_counts() {
        let c = vec![conv("x", &[(Speaker::User, "a b"), (Speaker::System, "b a")])];
        // two surface tokens, PAD/EOS/SEP, two speaker tags, K bins
        assert_eq!(build_vocab(&c, 2).unwrap().len(), 2 + 3 + 2 + 2);
        assert_eq!(build_vocab(&c, 4).unwrap().len(), 2 + 3 + 2 + 4);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert_eq!(build_vocab(&[], 2).unwrap_err().to_string(), "empty corpus");
    }

    #[test]
    fn reserved_surface_tokens_are_rejected() {
        let c = vec![conv("x", &[(Speaker::System, "hi <eos>")])];
        assert!(build_vocab(&c, 2).is_err());
        let c = vec![conv("x", &[(Speaker::System, "hi <r1>")])];
        assert!(build_vocab(&c, 2).is_err());
    }

    #[test]
    fn one_pair_per_system_turn() {
        let c = vec![conv(
            "x",
            &[(Speaker::User, "a"), (Speaker::System, "b"), (Speaker::User, "a a"), (Speaker::System, "b"), (Speaker::System, "a b")],
        )];
        let v = build_vocab(&c, 2).unwrap();
        let pairs = pairs_from_conversations(&c, &v, 100).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert_eq!(*p.context.last().unwrap(), v.sep());
            assert_eq!(*p.response.last().unwrap(), v.eos());
        }
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        let (cus, rep) = (v.speaker_tag(Speaker::User), v.speaker_tag(Speaker::System));
        assert_eq!(pairs[1].context, vec![cus, a, rep, b, cus, a, a, rep, v.sep()]);
    }

    #[test]
    fn left_truncation_keeps_recent_tokens() {
        let c = vec![conv("x", &[(Speaker::User, "a b a b a b"), (Speaker::System, "a")])];
        let v = build_vocab(&c, 2).unwrap();
        let p = &pairs_from_conversations(&c, &v, 3).unwrap()[0];
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(p.context, vec![a, b, v.speaker_tag(Speaker::System), v.sep()]);
    }

    #[test]
    fn opening_system_turn_has_bare_context() {
        let c = vec![conv("x", &[(Speaker::System, "a")])];
        let v = build_vocab(&c, 2).unwrap();
        let p = &pairs_from_conversations(&c, &v, 8).unwrap()[0];
        assert_eq!(p.context, vec![v.speaker_tag(Speaker::System), v.sep()]);
    }

    #[test]
    fn tokenize_round_trip() {
        let c = vec![conv("x", &[(Speaker::User, "hello there"), (Speaker::System, "general kenobi")])];
        let v = build_vocab(&c, 3).unwrap();
        let ids = v.tokenize("kenobi hello there").unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), "kenobi hello there");
        let all: Vec<u32> = (0..v.len() as u32).collect();
        assert_eq!(v.encode(&v.decode(&all).unwrap()).unwrap(), all);
        assert!(matches!(v.tokenize("obi-wan"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn vocab_serde_round_trip() {
        let c = vec![conv("x", &[(Speaker::System, "p q r")])];
        let v = build_vocab(&c, 2).unwrap();
        let back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn split_is_seed_stable() {
        let ids: Vec<String> = (0..2000).map(|i| format!("c{i}")).collect();
        let counts = ids.iter().fold([0usize; 3], |mut acc, id| {
            acc[split_of(3, id) as usize] += 1;
            acc
        });
        assert!(counts[0] > 1500 && counts[0] < 1700, "{counts:?}");
        assert!(ids.iter().all(|id| split_of(3, id) == split_of(3, id)));
    }
}
