//! Finite-difference gradient checking.

use super::{Graph, ParamStore, Result, Var};
use crate::scalar::Scalar;

/// Largest relative error found by [`finite_difference_check`] and where.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub param: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor so that near-zero gradients compare by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients of `loss_fn` with central differences for
/// every scalar in `store` (or at most `max_per_param` per tensor).
pub fn finite_difference_check<T, F>(store: &mut ParamStore<T>, h: f64, max_per_param: usize, mut loss_fn: F) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_into(store);

    let mut worst = GradCheck { max_rel_error: 0.0, param: String::new(), element: 0, analytic: 0.0, numeric: 0.0 };
    let mut eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.scalar(l).as_f64())
    };
    for i in 0..store.len() {
        let n = store.get(i).values.len();
        let stride = (n / max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let analytic = store.grad(i).map_or(0.0, |g| g[j].as_f64());
            let orig = store.get(i).values[j];
            store.get_mut(i).values[j] = T::lit(orig.as_f64() + h);
            let up = eval(store)?;
            store.get_mut(i).values[j] = T::lit(orig.as_f64() - h);
            let down = eval(store)?;
            store.get_mut(i).values[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic, numeric);
            if err > worst.max_rel_error {
                worst = GradCheck { max_rel_error: err, param: store.get(i).name.clone(), element: j, analytic, numeric };
            }
        }
    }
    store.zero_grad();
    Ok(worst)
}
