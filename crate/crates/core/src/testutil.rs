//! Central-difference gradient oracle shared by unit tests.

use crate::numeric::{Graph, ParamId, ParameterStore};
use crate::Result;

pub const FD_STEP: f64 = 1e-4;

/// Relative error with an absolute floor so near-zero gradients compare
/// sensibly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Five-point central difference of the loss in one scalar of `id`.
pub fn central_difference<F>(store: &mut ParameterStore, id: ParamId, k: usize, loss: &F) -> Result<f64>
where
    F: Fn(&ParameterStore, &mut Graph) -> Result<crate::numeric::Var>,
{
    let orig = store.value(id).data()[k];
    let mut at = |offset: f64| -> Result<f64> {
        store.value_mut(id)[k] = orig + offset;
        let mut g = Graph::new();
        let l = loss(store, &mut g)?;
        Ok(g.value(l).item())
    };
    let h = FD_STEP;
    let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
    store.value_mut(id)[k] = orig;
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

/// Compares reverse-mode gradients of `loss(store)` with central
/// differences for every scalar of the listed parameters. Returns the
/// worst relative error seen.
pub fn max_grad_error<F>(store: &mut ParameterStore, ids: &[ParamId], loss: F) -> Result<f64>
where
    F: Fn(&ParameterStore, &mut Graph) -> Result<crate::numeric::Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    g.backward(l, store)?;
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = store.grad(id).data().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let numeric = central_difference(store, id, k, &loss)?;
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}
