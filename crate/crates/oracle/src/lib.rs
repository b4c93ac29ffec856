//! Exact reference computations for small, enumerable sequence MDPs.
//!
//! Nothing in this crate shares numerical code with the trainers it is used
//! to check. Every routine works on plain `f64` and token ids (`u32`) so the
//! results can be frozen into tests or compared against learned models.

mod best_of_n;
mod conditional;
mod expectile;
mod tree;

use std::path::PathBuf;

pub use best_of_n::{best_of_n_expectation, best_of_n_order_statistic, ResponseTable};
pub use conditional::{empirical_conditional, EmpiricalConditional, NextTokenDist};
pub use expectile::{expectile, expectile_balance};
pub use tree::{tree_dp, TreeMdp, TreeSolution};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("tree node {prefix:?} has action {action} with no leaf reward and no subtree")]
    MissingLeafReward { prefix: Vec<u32>, action: u32 },
    #[error("leaf {0:?} is a strict prefix of another leaf; terminal nodes cannot have children")]
    LeafHasChildren(Vec<u32>),
    #[error("tree violates its bounds: {0}")]
    Bounds(String),
    #[error("reward {0} outside [0, 1]")]
    RewardRange(f64),
    #[error("enumeration needs {needed} outcome multisets, cap is {cap}")]
    Blowup { needed: u128, cap: u128 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("fixture json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fixture io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Directory holding the committed tree fixtures.
pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Total-variation distance between two distributions over token ids.
/// Missing keys count as zero mass.
pub fn total_variation(
    p: &std::collections::BTreeMap<u32, f64>,
    q: &std::collections::BTreeMap<u32, f64>,
) -> f64 {
    let keys: std::collections::BTreeSet<u32> = p.keys().chain(q.keys()).copied().collect();
    0.5 * keys
        .iter()
        .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}
