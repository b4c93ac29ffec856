//! Stage-2 artifact: every training context paired with its human response
//! and `n_model` responses sampled from the behavior policy, all scored by
//! the terminal reward.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Example;
use crate::corpus::ContextResponsePair;
use crate::error::{Error, IoContext, Result};
use crate::model::{sample_responses, DecodeConfig, NextToken};
use crate::rewards::{RewardSpec, Rewarder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineRecord {
    /// Key of the context/response pair this record was generated for.
    pub context_id: String,
    pub context: Vec<u32>,
    pub response: Vec<u32>,
    pub reward: f64,
    pub source: Source,
    /// 0 for the human record, 1.. for model samples.
    pub sample_index: usize,
    /// Response hit the horizon without emitting EOS.
    pub truncated: bool,
}

impl OfflineRecord {
    pub fn example(&self) -> Example {
        Example { context: self.context.clone(), condition: None, response: self.response.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineProvenance {
    /// Hash of the behavior checkpoint that produced the samples.
    pub behavior: String,
    pub reward_spec: RewardSpec,
    pub n_model: usize,
    /// Extra upstream hashes (config, corpus).
    #[serde(default)]
    pub upstream: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub provenance: OfflineProvenance,
    pub records: Vec<OfflineRecord>,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorts by context id, then human before model, then sample index.
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| {
            (a.context_id.as_str(), a.source, a.sample_index).cmp(&(b.context_id.as_str(), b.source, b.sample_index))
        });
    }

    pub fn with_records(&self, records: Vec<OfflineRecord>) -> Self {
        Self { provenance: self.provenance.clone(), records }
    }

    pub fn context_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.context_id.as_str()).collect();
        ids.dedup();
        ids
    }

    /// Keeps a random `fraction` of the context groups (at least one),
    /// preserving record order.
    pub fn subsample_contexts<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Invalid(format!("data fraction must be in (0, 1], got {fraction}")));
        }
        let mut ids = self.context_ids();
        let keep = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len().max(1));
        if keep >= ids.len() {
            return Ok(self.clone());
        }
        ids.shuffle(rng);
        let chosen: std::collections::HashSet<&str> = ids[..keep].iter().copied().collect();
        let records = self.records.iter().filter(|r| chosen.contains(r.context_id.as_str())).cloned().collect();
        Ok(self.with_records(records))
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reward).collect()
    }
}

/// Per context: the human response plus `n_model` samples from `policy`
/// (temperature 1, no top-k, stopping at EOS or the horizon). Duplicate
/// samples are kept.
pub fn generate_offline_dataset<P: NextToken + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    pairs: &[&ContextResponsePair],
    rewarder: &Rewarder,
    n_model: usize,
    horizon: usize,
    provenance: OfflineProvenance,
    rng: &mut R,
) -> Result<OfflineDataset> {
    let eos = rewarder.vocab().eos();
    let decode = DecodeConfig::sample(horizon, n_model.max(1));
    let mut records = Vec::with_capacity(pairs.len() * (n_model + 1));
    for pair in pairs {
        let mut items = vec![(pair.response.clone(), *pair)];
        if n_model > 0 {
            for r in sample_responses(policy, &pair.context, None, &decode, eos, rng)? {
                items.push((r, *pair));
            }
        }
        let rewards = rewarder.reward_batch(&items)?;
        for (i, ((response, _), reward)) in items.into_iter().zip(rewards).enumerate() {
            let truncated = response.last() != Some(&eos);
            records.push(OfflineRecord {
                context_id: pair.key(),
                context: pair.context.clone(),
                response,
                reward,
                source: if i == 0 { Source::Human } else { Source::Model },
                sample_index: i,
                truncated,
            });
        }
    }
    let mut ds = OfflineDataset { provenance, records };
    ds.sort();
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct Header {
    provenance: OfflineProvenance,
    records: usize,
}

/// JSON Lines: a provenance header, then one record per line.
pub fn save_offline_dataset(path: &Path, data: &OfflineDataset) -> Result<()> {
    let file = std::fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    let header = Header { provenance: data.provenance.clone(), records: data.records.len() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").at(path)?;
    for r in &data.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

pub fn load_offline_dataset(path: &Path) -> Result<OfflineDataset> {
    let file = std::fs::File::open(path).at(path)?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let first = lines.next().ok_or_else(|| parse_err(1, "missing provenance header".into()))?.at(path)?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    let mut records = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OfflineRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
        if !(0.0..=1.0).contains(&rec.reward) {
            return Err(parse_err(i + 2, format!("reward {} outside [0, 1]", rec.reward)));
        }
        records.push(rec);
    }
    if records.len() != header.records {
        return Err(parse_err(1, format!("header announces {} records, found {}", header.records, records.len())));
    }
    Ok(OfflineDataset { provenance: header.provenance, records })
}
