use crate::{OracleError, Result};

/// Residual of the expectile balance condition
/// `τ Σ (x − v)₊ − (1 − τ) Σ (v − x)₊`; strictly decreasing in `v`.
pub fn expectile_balance(samples: &[f64], tau: f64, v: f64) -> f64 {
    let (mut above, mut below) = (0.0, 0.0);
    for &x in samples {
        if x > v {
            above += x - v;
        } else {
            below += v - x;
        }
    }
    tau * above - (1.0 - tau) * below
}

/// The `τ`-expectile of `samples`, solved by bisection to 1e-9.
pub fn expectile(samples: &[f64], tau: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(OracleError::Invalid("expectile of empty sample set".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(OracleError::Invalid(format!("tau {tau} not in (0, 1)")));
    }
    let mut lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(lo);
    }
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if expectile_balance(samples, tau, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
