use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(|analytic|, |numeric|, 1e-6)
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare backward-pass gradients with central differences.
///
/// `loss` builds a scalar on the supplied graph from the store; it is called
/// once with gradients enabled and twice per checked coordinate without. It
/// must be deterministic (the graph is always in eval mode). Up to
/// `coords_per_param` coordinates of every trainable parameter are sampled.
pub fn finite_difference_check<L>(
    store: &mut ParamStore<f64>,
    mut loss: L,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    L: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new(Mode::Eval, 0);
    let out = loss(&mut g, store)?;
    g.backward(out, &mut [&mut *store])?;
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::no_grad(Mode::Eval, 0);
        let out = loss(&mut g, store)?;
        Ok(g.value(out).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    for id in ids {
        let n = store.value(id).len();
        let coords = sample(&mut rng, n, coords_per_param.min(n));
        for j in coords.iter() {
            let analytic = store.get(id).grad().data()[j];
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            // The floor turns the comparison absolute for gradients that vanish
            // identically, such as attention key biases under softmax.
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    store.zero_grad();
    Ok(report)
}
