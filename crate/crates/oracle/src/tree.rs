use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{OracleError, Result};

pub const MAX_VOCAB: u32 = 8;
pub const MAX_DEPTH: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub tokens: Vec<u32>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorNode {
    pub prefix: Vec<u32>,
    /// `(action, probability)` pairs; must sum to one.
    pub probs: Vec<(u32, f64)>,
}

/// A prefix-keyed sequence MDP whose transition graph is a tree.
///
/// States are token prefixes, the root is the empty prefix and every leaf is a
/// complete response carrying a terminal reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeMdp {
    pub name: String,
    pub vocab_size: u32,
    pub max_depth: usize,
    pub leaves: Vec<Leaf>,
    #[serde(default)]
    pub behavior: Vec<BehaviorNode>,
}

impl TreeMdp {
    pub fn new(name: impl Into<String>, vocab_size: u32, max_depth: usize) -> Self {
        Self { name: name.into(), vocab_size, max_depth, leaves: Vec::new(), behavior: Vec::new() }
    }

    pub fn with_leaf(mut self, tokens: &[u32], reward: f64) -> Self {
        self.leaves.push(Leaf { tokens: tokens.to_vec(), reward });
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mdp: TreeMdp = serde_json::from_str(&text)?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > MAX_VOCAB {
            return Err(OracleError::Bounds(format!("vocab {} not in 1..={MAX_VOCAB}", self.vocab_size)));
        }
        if self.max_depth == 0 || self.max_depth > MAX_DEPTH {
            return Err(OracleError::Bounds(format!("depth {} not in 1..={MAX_DEPTH}", self.max_depth)));
        }
        if self.leaves.is_empty() {
            return Err(OracleError::Bounds("no leaves".into()));
        }
        let mut seen = BTreeSet::new();
        for leaf in &self.leaves {
            if leaf.tokens.is_empty() || leaf.tokens.len() > self.max_depth {
                return Err(OracleError::Bounds(format!("leaf {:?} has bad length", leaf.tokens)));
            }
            if let Some(t) = leaf.tokens.iter().find(|&&t| t >= self.vocab_size) {
                return Err(OracleError::Bounds(format!("token {t} outside vocab")));
            }
            if !(0.0..=1.0).contains(&leaf.reward) {
                return Err(OracleError::RewardRange(leaf.reward));
            }
            if !seen.insert(leaf.tokens.clone()) {
                return Err(OracleError::Bounds(format!("duplicate leaf {:?}", leaf.tokens)));
            }
        }
        let internal = self.internal_states();
        for leaf in &self.leaves {
            if internal.contains(&leaf.tokens) {
                return Err(OracleError::LeafHasChildren(leaf.tokens.clone()));
            }
        }
        for node in &self.behavior {
            if !internal.contains(&node.prefix) {
                return Err(OracleError::Bounds(format!("behavior at non-internal {:?}", node.prefix)));
            }
            let children = self.actions(&node.prefix);
            for &(a, _) in &node.probs {
                if !children.contains(&a) {
                    return Err(OracleError::MissingLeafReward { prefix: node.prefix.clone(), action: a });
                }
            }
            let total: f64 = node.probs.iter().map(|p| p.1).sum();
            if (total - 1.0).abs() > 1e-9 || node.probs.iter().any(|p| p.1 < 0.0) {
                return Err(OracleError::Bounds(format!("behavior at {:?} is not a distribution", node.prefix)));
            }
        }
        Ok(())
    }

    fn leaf_map(&self) -> BTreeMap<&[u32], f64> {
        self.leaves.iter().map(|l| (l.tokens.as_slice(), l.reward)).collect()
    }

    /// All non-terminal states: every strict prefix of some leaf.
    pub fn internal_states(&self) -> BTreeSet<Vec<u32>> {
        let mut out = BTreeSet::new();
        for leaf in &self.leaves {
            for k in 0..leaf.tokens.len() {
                out.insert(leaf.tokens[..k].to_vec());
            }
        }
        out
    }

    /// Actions available at `prefix` (the distinct next tokens of leaves below it).
    pub fn actions(&self, prefix: &[u32]) -> BTreeSet<u32> {
        self.leaves
            .iter()
            .filter(|l| l.tokens.len() > prefix.len() && l.tokens.starts_with(prefix))
            .map(|l| l.tokens[prefix.len()])
            .collect()
    }

    pub fn leaf_reward(&self, tokens: &[u32]) -> Option<f64> {
        self.leaves.iter().find(|l| l.tokens == tokens).map(|l| l.reward)
    }

    pub fn behavior_at(&self, prefix: &[u32]) -> Option<&[(u32, f64)]> {
        self.behavior.iter().find(|b| b.prefix == prefix).map(|b| b.probs.as_slice())
    }
}

/// Optimal action values and state values of a [`TreeMdp`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TreeSolution {
    pub q: BTreeMap<(Vec<u32>, u32), f64>,
    pub v: BTreeMap<Vec<u32>, f64>,
}

impl TreeSolution {
    pub fn q(&self, prefix: &[u32], action: u32) -> Option<f64> {
        self.q.get(&(prefix.to_vec(), action)).copied()
    }

    pub fn v(&self, prefix: &[u32]) -> Option<f64> {
        self.v.get(prefix).copied()
    }

    /// Greedy action at `prefix`, ties broken towards the lowest token id.
    pub fn optimal_action(&self, prefix: &[u32]) -> Option<u32> {
        let mut best: Option<(u32, f64)> = None;
        for ((p, a), q) in self.q.range((prefix.to_vec(), 0)..=(prefix.to_vec(), u32::MAX)) {
            debug_assert_eq!(p.as_slice(), prefix);
            if best.is_none_or(|(_, bq)| *q > bq) {
                best = Some((*a, *q));
            }
        }
        best.map(|b| b.0)
    }
}

/// Backward induction: `Q*(s,a) = r(s,a) + γ V*(s')`, `V*(s) = max_a Q*(s,a)`,
/// with `V* = 0` at terminal states.
pub fn tree_dp(mdp: &TreeMdp, gamma: f64) -> Result<TreeSolution> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(OracleError::Invalid(format!("gamma {gamma} not in (0, 1]")));
    }
    mdp.validate()?;
    let leaves = mdp.leaf_map();
    let mut internal: Vec<Vec<u32>> = mdp.internal_states().into_iter().collect();
    internal.sort_by_key(|p| std::cmp::Reverse(p.len()));

    let mut sol = TreeSolution::default();
    for state in internal {
        let mut best = f64::NEG_INFINITY;
        for a in mdp.actions(&state) {
            let mut next = state.clone();
            next.push(a);
            let q = match leaves.get(next.as_slice()) {
                Some(&r) => r,
                None => {
                    let v_next = sol
                        .v
                        .get(&next)
                        .copied()
                        .ok_or(OracleError::MissingLeafReward { prefix: state.clone(), action: a })?;
                    gamma * v_next
                }
            };
            best = best.max(q);
            sol.q.insert((state.clone(), a), q);
        }
        sol.v.insert(state, best);
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_one_tree() {
        let mdp = TreeMdp::new("d1", 2, 1).with_leaf(&[0], 0.2).with_leaf(&[1], 0.9);
        let sol = tree_dp(&mdp, 1.0).unwrap();
        assert_eq!(sol.v(&[]), Some(0.9));
        assert_eq!(sol.q(&[], 0), Some(0.2));
        assert_eq!(sol.optimal_action(&[]), Some(1));
    }

    #[test]
    fn all_zero_rewards() {
        let mdp = TreeMdp::new("z", 3, 3)
            .with_leaf(&[0, 1], 0.0)
            .with_leaf(&[0, 2, 1], 0.0)
            .with_leaf(&[2], 0.0);
        let sol = tree_dp(&mdp, 1.0).unwrap();
        assert!(sol.q.values().all(|&q| q == 0.0));
    }

    #[test]
    fn depth_two_hand_computed() {
        // root -a-> {a,a}=0.1 {a,b}=0.7 ; root -b-> {b,a}=0.4 {b,b}=0.3 ; root -c-> leaf 0.5
        // By hand with gamma=0.9: V(a)=0.7, V(b)=0.4,
        // Q(root,a)=0.63, Q(root,b)=0.36, Q(root,c)=0.5, V(root)=0.63.
        let mdp = TreeMdp::new("d2", 3, 2)
            .with_leaf(&[0, 0], 0.1)
            .with_leaf(&[0, 1], 0.7)
            .with_leaf(&[1, 0], 0.4)
            .with_leaf(&[1, 1], 0.3)
            .with_leaf(&[2], 0.5);
        let sol = tree_dp(&mdp, 0.9).unwrap();
        let close = |a: Option<f64>, b: f64| (a.unwrap() - b).abs() < 1e-12;
        assert!(close(sol.v(&[0]), 0.7));
        assert!(close(sol.v(&[1]), 0.4));
        assert!(close(sol.q(&[], 0), 0.63));
        assert!(close(sol.q(&[], 1), 0.36));
        assert!(close(sol.q(&[], 2), 0.5));
        assert!(close(sol.v(&[]), 0.63));
        assert_eq!(sol.optimal_action(&[1]), Some(0));
    }

    #[test]
    fn behavior_on_missing_child_is_error() {
        let mut mdp = TreeMdp::new("bad", 3, 2).with_leaf(&[0], 0.5).with_leaf(&[1], 0.1);
        mdp.behavior.push(BehaviorNode { prefix: vec![], probs: vec![(0, 0.5), (2, 0.5)] });
        assert!(matches!(mdp.validate(), Err(OracleError::MissingLeafReward { action: 2, .. })));
    }

    #[test]
    fn leaf_with_children_is_rejected() {
        let mdp = TreeMdp::new("bad", 3, 2).with_leaf(&[0], 0.5).with_leaf(&[0, 1], 0.1);
        assert!(matches!(tree_dp(&mdp, 1.0), Err(OracleError::LeafHasChildren(_))));
    }

    #[test]
    fn adding_dominated_leaf_keeps_root_value() {
        let base = TreeMdp::new("m", 4, 3).with_leaf(&[0, 1], 0.6).with_leaf(&[1], 0.3);
        let v0 = tree_dp(&base, 1.0).unwrap().v(&[]).unwrap();
        let more = base.clone().with_leaf(&[0, 2, 3], 0.5).with_leaf(&[2], 0.6);
        let v1 = tree_dp(&more, 1.0).unwrap().v(&[]).unwrap();
        assert_eq!(v0, v1);
    }

    #[test]
    fn committed_fixtures_load() {
        for entry in std::fs::read_dir(crate::fixtures_dir()).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                let mdp = TreeMdp::load(&path).unwrap();
                assert!(mdp.max_depth <= 5, "{}", mdp.name);
                tree_dp(&mdp, 1.0).unwrap();
            }
        }
    }
}
