//! Central finite-difference gradient checking in f64.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error `|a − n| / max(|a|, |n|, floor)` seen.
    pub max_rel_err: f64,
    pub coordinates: usize,
}

/// Smallest finite-difference step; [`STEPS`] doublings are tried.
pub const STEP: f64 = 2e-6;
pub const STEPS: usize = 6;
/// Below this magnitude agreement is judged absolutely: one ulp of an O(1)
/// loss over the step is about 1e-10, and exactly-zero gradients (shift
/// invariant parameters) would otherwise never pass.
pub const FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares analytic parameter gradients of `loss_fn` with stable central
/// differences on up to `per_param` sampled coordinates of every parameter.
pub fn check_params<F, R>(
    store: &ParamStore<f64>,
    loss_fn: F,
    per_param: usize,
    rng: &mut R,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
    R: Rng + ?Sized,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        coordinates: 0,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        let picks = sample(rng, n, per_param.min(n));
        for i in picks {
            let orig = store.get(id).data()[i];
            let numeric = stable_difference(|x| {
                work.get_mut(id).data_mut()[i] = x;
                eval(&work)
            }, orig)?;
            work.get_mut(id).data_mut()[i] = orig;
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            report.max_rel_err = report.max_rel_err.max(relative_error(analytic, numeric));
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Central difference at the step where it is most stable. Steps double
/// from [`STEP`]; the chosen estimate is the one that changes least when
/// the step doubles, which sits between the roundoff regime (small steps)
/// and the truncation regime (large steps, or steps that cross a kink).
/// The analytic gradient plays no part in the choice.
pub fn stable_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let mut d = Vec::with_capacity(STEPS);
    let mut h = STEP;
    for _ in 0..STEPS {
        d.push((f(x + h)? - f(x - h)?) / (2.0 * h));
        h *= 2.0;
    }
    let best = (0..STEPS - 1)
        .min_by(|&a, &b| (d[a] - d[a + 1]).abs().total_cmp(&(d[b] - d[b + 1]).abs()))
        .expect("at least two steps");
    Ok(d[best])
}
