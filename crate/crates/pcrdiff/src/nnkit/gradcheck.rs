//! Finite-difference verification of backprop gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::NnError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Loss value and per-parameter backprop gradients for the graph built by
/// `builder` on the current parameter values.
pub fn backprop_gradients<F, E>(
    builder: &F,
    store: &ParamStore,
) -> Result<(f64, BTreeMap<String, Tensor>), E>
where
    F: Fn(&ParamStore) -> Result<(Graph, Var), E>,
    E: From<NnError>,
{
    let (graph, loss) = builder(store)?;
    let value = graph.value(loss).item();
    let grads = graph.backward(loss);
    let mut out = BTreeMap::new();
    for (name, var) in graph.param_vars() {
        out.insert(name.to_string(), grads.dense(&graph, var));
    }
    Ok((value, out))
}

/// Central finite difference of the loss along one parameter scalar.
pub fn finite_diff<F, E>(
    builder: &F,
    store: &mut ParamStore,
    name: &str,
    idx: usize,
    h: f64,
) -> Result<f64, E>
where
    F: Fn(&ParamStore) -> Result<(Graph, Var), E>,
    E: From<NnError>,
{
    store.perturb(name, idx, h).map_err(E::from)?;
    let (g, l) = builder(store)?;
    let plus = g.value(l).item();
    store.perturb(name, idx, -2.0 * h).map_err(E::from)?;
    let (g, l) = builder(store)?;
    let minus = g.value(l).item();
    store.perturb(name, idx, h).map_err(E::from)?;
    Ok((plus - minus) / (2.0 * h))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Verifies backprop against central differences.
///
/// All parameter scalars are checked when the store holds at most
/// `max_samples`; above that a seeded random subsample of that size is
/// used. The loss must be deterministic: two builds are compared first and
/// [`NnError::NonDeterministicLoss`] is raised if they disagree.
pub fn grad_check<F, E>(
    builder: &F,
    store: &mut ParamStore,
    h: f64,
    max_samples: usize,
    seed: u64,
) -> Result<f64, E>
where
    F: Fn(&ParamStore) -> Result<(Graph, Var), E>,
    E: From<NnError>,
{
    let (l1, analytic) = backprop_gradients(builder, store)?;
    let (l2, _) = backprop_gradients(builder, store)?;
    if l1 != l2 {
        return Err(NnError::NonDeterministicLoss { first: l1, second: l2 }.into());
    }

    let mut coords: Vec<(String, usize)> = Vec::new();
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let len = store.get(&name).map_err(E::from)?.len();
        for i in 0..len {
            coords.push((name.clone(), i));
        }
    }
    if coords.len() > max_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_samples);
    }

    let mut max_err = 0.0f64;
    for (name, idx) in coords {
        let numeric = finite_diff(builder, store, &name, idx, h)?;
        let a = analytic[&name].data()[idx];
        max_err = max_err.max(relative_error(a, numeric));
    }
    Ok(max_err)
}
