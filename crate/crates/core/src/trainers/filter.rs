//! Return filtering for TF-Top and return quantization for DT.

use serde::{Deserialize, Serialize};

use super::offline::OfflineDataset;
use crate::corpus::Vocab;
use crate::error::{Error, Result};

/// Which records count as "good enough": a fixed slack `δ` (keep returns
/// `≥ 1 − δ`) or a quantile of the dataset's own return distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopFilterConfig {
    Delta(f64),
    Quantile(f64),
}

impl Default for TopFilterConfig {
    fn default() -> Self {
        TopFilterConfig::Quantile(0.75)
    }
}

impl TopFilterConfig {
    pub fn validate(&self) -> Vec<String> {
        match *self {
            TopFilterConfig::Delta(d) if !(0.0..=1.0).contains(&d) => vec![format!("filter delta must be in [0, 1], got {d}")],
            TopFilterConfig::Quantile(q) if !(0.0..=1.0).contains(&q) => vec![format!("filter quantile must be in [0, 1], got {q}")],
            _ => Vec::new(),
        }
    }

    /// The return threshold `1 − δ` this config implies on `data`.
    pub fn threshold(&self, data: &OfflineDataset) -> Result<f64> {
        let errs = self.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        match *self {
            TopFilterConfig::Delta(d) => Ok(1.0 - d),
            TopFilterConfig::Quantile(q) => quantile_threshold(&data.rewards(), q),
        }
    }

    /// Fixes a quantile config to the δ it implies on `data`, so that
    /// filtering again (on the filtered set) is a no-op.
    pub fn resolve(&self, data: &OfflineDataset) -> Result<TopFilterConfig> {
        Ok(TopFilterConfig::Delta(1.0 - self.threshold(data)?))
    }
}

/// Lower empirical quantile: `sorted[floor(q (n − 1))]`.
pub fn quantile_threshold(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("quantile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let i = (q * (v.len() - 1) as f64).floor() as usize;
    Ok(v[i.min(v.len() - 1)])
}

const BOUNDARY_SLACK: f64 = 1e-12;

/// Records whose return is at least the threshold (inclusive).
pub fn filter_top(data: &OfflineDataset, cfg: &TopFilterConfig) -> Result<OfflineDataset> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot filter an empty dataset".into()));
    }
    let threshold = cfg.threshold(data)?;
    let records: Vec<_> = data.records.iter().filter(|r| r.reward >= threshold - BOUNDARY_SLACK).cloned().collect();
    if records.is_empty() {
        return Err(Error::EmptyFilter { threshold });
    }
    Ok(data.with_records(records))
}

/// `K` bins over `[0, 1]`, left-closed except the top bin which also holds 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinQuantizer {
    edges: Vec<f64>,
}

impl BinQuantizer {
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("bin count must be positive".into()));
        }
        Self::new((0..=k).map(|i| i as f64 / k as f64).collect())
    }

    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges[0] != 0.0 || *edges.last().expect("len checked") != 1.0 {
            return Err(Error::Invalid(format!("bin edges must run from 0 to 1, got {edges:?}")));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invalid(format!("bin edges must strictly increase, got {edges:?}")));
        }
        Ok(Self { edges })
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn top(&self) -> usize {
        self.num_bins() - 1
    }

    pub fn bin(&self, r: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::RewardRange(r));
        }
        let k = self.num_bins();
        Ok(self.edges[1..k].iter().take_while(|&&e| e <= r).count())
    }
}

/// Bin token for a return.
pub fn quantize_return(r: f64, quantizer: &BinQuantizer, vocab: &Vocab) -> Result<u32> {
    if quantizer.num_bins() > vocab.num_bins() {
        return Err(Error::Invalid(format!("quantizer has {} bins but the vocabulary only {}", quantizer.num_bins(), vocab.num_bins())));
    }
    Ok(vocab.bin_token(quantizer.bin(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainers::offline::tests::record;
    use crate::trainers::{OfflineProvenance, Source};

    fn data(rewards: &[f64]) -> OfflineDataset {
        OfflineDataset {
            provenance: OfflineProvenance { behavior: String::new(), reward_spec: Default::default(), n_model: 0, upstream: Default::default() },
            records: rewards.iter().enumerate().map(|(i, &r)| record(&format!("c{i}"), r, Source::Model, 1)).collect(),
        }
    }

    #[test]
    fn delta_examples() {
        let d = data(&[0.2, 0.8]);
        assert_eq!(filter_top(&d, &TopFilterConfig::Delta(0.3)).unwrap().rewards(), vec![0.8]);
        assert_eq!(filter_top(&d, &TopFilterConfig::Delta(1.0)).unwrap().len(), 2);
        let b = data(&[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(filter_top(&b, &TopFilterConfig::Delta(0.5)).unwrap().rewards(), vec![1.0, 1.0]);
    }

    #[test]
    fn empty_filter_advises() {
        let err = filter_top(&data(&[0.1]), &TopFilterConfig::Delta(0.0)).unwrap_err();
        assert!(err.to_string().contains("lower the threshold"), "{err}");
    }

    #[test]
    fn boundary_is_inclusive() {
        let d = data(&[0.7, 0.69]);
        assert_eq!(filter_top(&d, &TopFilterConfig::Delta(0.3)).unwrap().rewards(), vec![0.7]);
    }

    #[test]
    fn quantiles() {
        let v = [0.4, 0.1, 0.3, 0.2, 0.5];
        assert_eq!(quantile_threshold(&v, 0.0).unwrap(), 0.1);
        assert_eq!(quantile_threshold(&v, 0.5).unwrap(), 0.3);
        assert_eq!(quantile_threshold(&v, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn bins() {
        let q2 = BinQuantizer::uniform(2).unwrap();
        assert_eq!(q2.bin(0.0).unwrap(), 0);
        assert_eq!(q2.bin(1.0).unwrap(), 1);
        let q4 = BinQuantizer::uniform(4).unwrap();
        assert_eq!(q4.bin(0.3).unwrap(), 1);
        assert_eq!(q4.bin(0.25).unwrap(), 1);
        assert_eq!(q4.bin(1.0).unwrap(), 3);
        assert!(q4.bin(1.5).is_err());
        assert!(BinQuantizer::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    }
}
