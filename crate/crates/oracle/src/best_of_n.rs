use crate::{OracleError, Result};

/// An enumerable response set: exact policy probability and reward per response.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTable {
    pub entries: Vec<(f64, f64)>,
}

impl ResponseTable {
    pub fn new(probs: &[f64], rewards: &[f64]) -> Result<Self> {
        if probs.len() != rewards.len() || probs.is_empty() {
            return Err(OracleError::Invalid("probs and rewards must be equal-length and nonempty".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < 0.0) {
            return Err(OracleError::Invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self { entries: probs.iter().copied().zip(rewards.iter().copied()).collect() })
    }
}

fn multiset_count(m: usize, n: usize) -> u128 {
    // C(m + n − 1, n), computed incrementally to stay exact
    let mut c: u128 = 1;
    for i in 1..=n as u128 {
        c = c.saturating_mul(m as u128 - 1 + i) / i;
    }
    c
}

/// `E[max reward of n i.i.d. draws]` by enumerating every outcome multiset
/// with its multinomial probability.
pub fn best_of_n_expectation(table: &ResponseTable, n: usize, cap: u128) -> Result<f64> {
    if n == 0 {
        return Err(OracleError::Invalid("n must be at least 1".into()));
    }
    let m = table.entries.len();
    let needed = multiset_count(m, n);
    if needed > cap {
        return Err(OracleError::Blowup { needed, cap });
    }
    let ln_fact: Vec<f64> = (0..=n).scan(0.0, |acc, k| {
        if k > 0 {
            *acc += (k as f64).ln();
        }
        Some(*acc)
    }).collect();

    let mut counts = vec![0usize; m];
    let mut total = 0.0;
    enumerate(&mut counts, 0, n, &mut |counts| {
        let mut ln_p = ln_fact[n];
        let mut best = f64::NEG_INFINITY;
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let (p, r) = table.entries[i];
            if p == 0.0 {
                return;
            }
            ln_p += c as f64 * p.ln() - ln_fact[c];
            best = best.max(r);
        }
        total += ln_p.exp() * best;
    });
    Ok(total)
}

fn enumerate(counts: &mut [usize], i: usize, left: usize, f: &mut impl FnMut(&[usize])) {
    if i + 1 == counts.len() {
        counts[i] = left;
        f(counts);
        counts[i] = 0;
        return;
    }
    for c in 0..=left {
        counts[i] = c;
        enumerate(counts, i + 1, left - c, f);
    }
    counts[i] = 0;
}

/// Same expectation through the order statistic of the max:
/// `Σ_j r_j (F(r_j)^n − F(r_{j−1})^n)` over distinct reward levels.
pub fn best_of_n_order_statistic(table: &ResponseTable, n: usize) -> f64 {
    let mut levels: Vec<(f64, f64)> = Vec::new();
    let mut sorted = table.entries.clone();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    for (p, r) in sorted {
        match levels.last_mut() {
            Some(last) if last.0 == r => last.1 += p,
            _ => levels.push((r, p)),
        }
    }
    let (mut cdf, mut prev, mut e) = (0.0f64, 0.0f64, 0.0);
    for (r, p) in levels {
        cdf += p;
        let now = cdf.min(1.0).powi(n as i32);
        e += r * (now - prev);
        prev = now;
    }
    e
}
