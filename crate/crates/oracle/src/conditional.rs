use std::collections::{BTreeMap, BTreeSet};

use crate::{OracleError, Result};

/// Normalized next-token distribution at one (context, prefix, bin) state.
pub type NextTokenDist = BTreeMap<u32, f64>;

type StateKey = (Vec<u32>, Vec<u32>, usize);

/// Exact counting estimate of `p(next token | context, prefix, return bin)`.
#[derive(Debug, Clone, Default)]
pub struct EmpiricalConditional {
    table: BTreeMap<StateKey, NextTokenDist>,
    num_bins: usize,
}

impl EmpiricalConditional {
    pub fn get(&self, context: &[u32], prefix: &[u32], bin: usize) -> Option<&NextTokenDist> {
        self.table.get(&(context.to_vec(), prefix.to_vec(), bin))
    }

    /// Every in-data state, in deterministic order.
    pub fn states(&self) -> impl Iterator<Item = (&[u32], &[u32], usize, &NextTokenDist)> {
        self.table.iter().map(|((c, p, b), d)| (c.as_slice(), p.as_slice(), *b, d))
    }

    /// `(context, prefix, bin)` triples where the prefix occurs in the data
    /// under some bin but never under `bin`. These have no defined conditional.
    pub fn absent(&self) -> Vec<StateKey> {
        let seen: BTreeSet<(Vec<u32>, Vec<u32>)> =
            self.table.keys().map(|(c, p, _)| (c.clone(), p.clone())).collect();
        let mut out = Vec::new();
        for (c, p) in seen {
            for b in 0..self.num_bins {
                if !self.table.contains_key(&(c.clone(), p.clone(), b)) {
                    out.push((c.clone(), p.clone(), b));
                }
            }
        }
        out
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }
}

fn bin_of(reward: f64, edges: &[f64]) -> Result<usize> {
    let k = edges.len() - 1;
    if !(0.0..=1.0).contains(&reward) {
        return Err(OracleError::RewardRange(reward));
    }
    for b in 0..k {
        let upper_ok = if b + 1 == k { reward <= edges[b + 1] } else { reward < edges[b + 1] };
        if reward >= edges[b] && upper_ok {
            return Ok(b);
        }
    }
    unreachable!("edges cover [0, 1]")
}

/// Count next tokens at every (context, response prefix) grouped by the
/// return bin of the whole record and normalize.
///
/// `records` are `(context, response, reward)`; `edges` are the `K + 1`
/// increasing bin boundaries from 0 to 1 (top bin right-inclusive).
pub fn empirical_conditional(
    records: &[(Vec<u32>, Vec<u32>, f64)],
    edges: &[f64],
) -> Result<EmpiricalConditional> {
    if edges.len() < 3 || edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
        return Err(OracleError::Invalid("edges must run 0..=1 with at least two bins".into()));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OracleError::Invalid("edges must be strictly increasing".into()));
    }
    let mut counts: BTreeMap<StateKey, BTreeMap<u32, u64>> = BTreeMap::new();
    for (context, response, reward) in records {
        let bin = bin_of(*reward, edges)?;
        for t in 0..response.len() {
            let key = (context.clone(), response[..t].to_vec(), bin);
            *counts.entry(key).or_default().entry(response[t]).or_default() += 1;
        }
    }
    let table = counts
        .into_iter()
        .map(|(key, c)| {
            let total: u64 = c.values().sum();
            let dist = c.into_iter().map(|(tok, n)| (tok, n as f64 / total as f64)).collect();
            (key, dist)
        })
        .collect();
    Ok(EmpiricalConditional { table, num_bins: edges.len() - 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BINARY: [f64; 3] = [0.0, 0.5, 1.0];

    #[test]
    fn top_bin_puts_all_mass_on_rewarded_response() {
        let recs = vec![(vec![9], vec![1, 2, 7], 1.0), (vec![9], vec![3, 2, 7], 0.0)];
        let oracle = empirical_conditional(&recs, &BINARY).unwrap();
        let d = oracle.get(&[9], &[], 1).unwrap();
        assert_eq!(d.get(&1), Some(&1.0));
        assert_eq!(d.len(), 1);
        // prefix [1] never appears with reward 0
        assert!(oracle.get(&[9], &[1], 0).is_none());
        assert!(oracle.absent().contains(&(vec![9], vec![1], 0)));
    }

    #[test]
    fn equal_rewards_split_evenly_at_the_fork() {
        let recs = vec![(vec![], vec![1, 7], 1.0), (vec![], vec![2, 7], 1.0)];
        let oracle = empirical_conditional(&recs, &BINARY).unwrap();
        let d = oracle.get(&[], &[], 1).unwrap();
        assert_eq!(d[&1], 0.5);
        assert_eq!(d[&2], 0.5);
    }

    #[test]
    fn reward_on_interior_edge_goes_up() {
        assert_eq!(bin_of(0.5, &BINARY).unwrap(), 1);
        assert_eq!(bin_of(1.0, &BINARY).unwrap(), 1);
        assert_eq!(bin_of(0.25, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap(), 1);
    }
}
