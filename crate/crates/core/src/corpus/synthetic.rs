//! A slot-filling customer-service corpus whose system acts each have
//! several interchangeable surface realizations.
//!
//! Every conversation follows: request, then per slot an ask / value /
//! confirm exchange, then optionally a thanks / closing exchange. Any system
//! act may instead come out as a generic holding reply ("one moment please")
//! with probability `generic_prob`. The generic realizations all start with
//! the same word, so at the first response token the generic act is the
//! single most likely choice even though any specific act is more likely to
//! be the right answer overall.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, Speaker, Turn};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_conversations: usize,
    pub num_intents: usize,
    pub slots_per_intent: usize,
    /// Realizations per system act.
    pub paraphrases: usize,
    pub generic_prob: f64,
    pub closing_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self { num_conversations: 500, num_intents: 10, slots_per_intent: 1, paraphrases: 3, generic_prob: 0.3, closing_prob: 0.5, seed: 7 }
    }
}

struct IntentDef {
    phrase: &'static str,
    slot: &'static str,
    values: [&'static str; 4],
}

const INTENTS: [IntentDef; 12] = [
    IntentDef { phrase: "book a table", slot: "time", values: ["six", "seven", "eight", "nine"] },
    IntentDef { phrase: "order a pizza", slot: "size", values: ["small", "medium", "large", "family"] },
    IntentDef { phrase: "reset my password", slot: "username", values: ["alice", "bob", "carol", "dave"] },
    IntentDef { phrase: "track my package", slot: "code", values: ["alpha", "bravo", "delta", "echo"] },
    IntentDef { phrase: "cancel my order", slot: "reason", values: ["late", "broken", "wrong", "expensive"] },
    IntentDef { phrase: "book a taxi", slot: "destination", values: ["airport", "station", "downtown", "harbor"] },
    IntentDef { phrase: "check my balance", slot: "account", values: ["checking", "savings", "credit", "business"] },
    IntentDef { phrase: "change my address", slot: "city", values: ["paris", "london", "berlin", "madrid"] },
    IntentDef { phrase: "book a flight", slot: "date", values: ["monday", "tuesday", "friday", "sunday"] },
    IntentDef { phrase: "return an item", slot: "item", values: ["shoes", "jacket", "phone", "lamp"] },
    IntentDef { phrase: "renew my membership", slot: "plan", values: ["basic", "silver", "gold", "platinum"] },
    IntentDef { phrase: "schedule a repair", slot: "day", values: ["today", "tomorrow", "weekend", "thursday"] },
];

const EXTRA_SLOTS: [(&str, [&str; 4]); 2] =
    [("name", ["smith", "jones", "lee", "garcia"]), ("email", ["gmail", "yahoo", "outlook", "proton"])];

const ASK: [&str; 4] = ["what {slot} would you like", "which {slot} do you need", "please tell me the {slot}", "could you share the {slot}"];
const CONFIRM: [&str; 4] = ["ok , {value} it is", "great , {value} is noted", "sure , i have {value}", "perfect , {value} works"];
const CLOSING: [&str; 4] = ["anything else i can help with", "is there anything else", "glad to help , goodbye", "thanks for contacting us"];
const GENERIC: [&str; 4] = ["one moment please", "one second please", "one moment , checking", "one minute please"];
/// Share of generic replies using the first (canonical) realization.
const GENERIC_HEAD: f64 = 0.9;

const REQUEST: [&str; 3] = ["i want to {intent}", "can you help me {intent}", "hi , i need to {intent}"];
const GIVE_VALUE: [&str; 3] = ["{value}", "it is {value}", "{value} please"];
const THANKS: [&str; 2] = ["thanks , that is all", "no , that is all"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseClass {
    pub id: u32,
    pub name: String,
    pub realizations: Vec<Vec<String>>,
}

/// Every system act of a synthetic corpus with its realizations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseTable {
    pub classes: Vec<ParaphraseClass>,
}

impl ParaphraseTable {
    pub fn get(&self, id: u32) -> Option<&ParaphraseClass> {
        self.classes.get(id as usize).filter(|c| c.id == id)
    }

    /// Whether `surface` is one of the realizations of class `id`.
    pub fn contains<S: AsRef<str>>(&self, id: u32, surface: &[S]) -> Option<bool> {
        let class = self.get(id)?;
        Some(class.realizations.iter().any(|r| r.len() == surface.len() && r.iter().zip(surface).all(|(a, b)| a == b.as_ref())))
    }

    fn push(&mut self, name: String, realizations: Vec<Vec<String>>) -> u32 {
        let id = self.classes.len() as u32;
        self.classes.push(ParaphraseClass { id, name, realizations });
        id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub conversations: Vec<Conversation>,
    pub paraphrases: ParaphraseTable,
}

fn split(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn words(template: &str, key: &str, value: &str) -> Vec<String> {
    split(&template.replace(key, value))
}

struct Acts {
    table: ParaphraseTable,
    ask: BTreeMap<(usize, usize), u32>,
    confirm: BTreeMap<(usize, usize, usize), u32>,
    closing: u32,
    generic: u32,
}

fn slot_of(intent: usize, slot: usize) -> (&'static str, [&'static str; 4]) {
    if slot == 0 {
        (INTENTS[intent].slot, INTENTS[intent].values)
    } else {
        EXTRA_SLOTS[slot - 1]
    }
}

fn build_acts(spec: &SyntheticTaskSpec) -> Acts {
    let p = spec.paraphrases;
    let mut table = ParaphraseTable::default();
    let mut ask = BTreeMap::new();
    let mut confirm = BTreeMap::new();
    for i in 0..spec.num_intents {
        for s in 0..spec.slots_per_intent {
            let (slot, values) = slot_of(i, s);
            let id = table.push(format!("ask:{i}:{slot}"), ASK[..p].iter().map(|t| words(t, "{slot}", slot)).collect());
            ask.insert((i, s), id);
            for (v, value) in values.iter().enumerate() {
                let id = table.push(format!("confirm:{i}:{slot}:{value}"), CONFIRM[..p].iter().map(|t| words(t, "{value}", value)).collect());
                confirm.insert((i, s, v), id);
            }
        }
    }
    let closing = table.push("closing".into(), CLOSING[..p].iter().map(|t| split(t)).collect());
    let generic = table.push("generic".into(), GENERIC[..p].iter().map(|t| split(t)).collect());
    Acts { table, ask, confirm, closing, generic }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.paraphrases < 2 {
            errs.push(format!("paraphrases must be at least 2, got {}", self.paraphrases));
        }
        if self.paraphrases > ASK.len() {
            errs.push(format!("paraphrases must be at most {}, got {}", ASK.len(), self.paraphrases));
        }
        if self.num_intents == 0 || self.num_intents > INTENTS.len() {
            errs.push(format!("num_intents must be in 1..={}, got {}", INTENTS.len(), self.num_intents));
        }
        if self.slots_per_intent == 0 || self.slots_per_intent > 1 + EXTRA_SLOTS.len() {
            errs.push(format!("slots_per_intent must be in 1..={}, got {}", 1 + EXTRA_SLOTS.len(), self.slots_per_intent));
        }
        if self.num_conversations == 0 {
            errs.push("num_conversations must be positive".into());
        }
        for (name, p) in [("generic_prob", self.generic_prob), ("closing_prob", self.closing_prob)] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        errs
    }
}

fn system_turn(acts: &Acts, class: u32, spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Turn {
    let (class, text) = if rng.random::<f64>() < spec.generic_prob {
        let p = spec.paraphrases;
        let pick = if rng.random::<f64>() < GENERIC_HEAD { 0 } else { 1 + rng.random_range(0..p - 1) };
        (acts.generic, acts.table.classes[acts.generic as usize].realizations[pick].clone())
    } else {
        let r = &acts.table.classes[class as usize].realizations;
        (class, r[rng.random_range(0..r.len())].clone())
    };
    Turn { speaker: Speaker::System, text, class: Some(class) }
}

fn user_turn(template: &str, key: &str, value: &str) -> Turn {
    Turn { speaker: Speaker::User, text: words(template, key, value), class: None }
}

/// Deterministic in `spec.seed`.
pub fn generate_synthetic_corpus(spec: &SyntheticTaskSpec) -> Result<SyntheticCorpus> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let acts = build_acts(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut conversations = Vec::with_capacity(spec.num_conversations);
    for n in 0..spec.num_conversations {
        let intent = rng.random_range(0..spec.num_intents);
        let mut turns = vec![user_turn(REQUEST[rng.random_range(0..REQUEST.len())], "{intent}", INTENTS[intent].phrase)];
        for s in 0..spec.slots_per_intent {
            let (_, values) = slot_of(intent, s);
            let v = rng.random_range(0..values.len());
            turns.push(system_turn(&acts, acts.ask[&(intent, s)], spec, &mut rng));
            turns.push(user_turn(GIVE_VALUE[rng.random_range(0..GIVE_VALUE.len())], "{value}", values[v]));
            turns.push(system_turn(&acts, acts.confirm[&(intent, s, v)], spec, &mut rng));
        }
        if rng.random::<f64>() < spec.closing_prob {
            turns.push(Turn { speaker: Speaker::User, text: split(THANKS[rng.random_range(0..THANKS.len())]), class: None });
            turns.push(system_turn(&acts, acts.closing, spec, &mut rng));
        }
        conversations.push(Conversation { id: format!("syn{:05}", n), turns });
    }
    Ok(SyntheticCorpus { conversations, paraphrases: acts.table })
}
