use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar function against central
/// differences with step `h`.
///
/// `f` builds the function on a fresh graph from leaves bound to `params`
/// (same order). Up to `max_coords` coordinates are sampled across all
/// parameters, each parameter contributing at least one. Returns
/// `max |analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn finite_difference_check<T, F>(
    mut f: F,
    params: &[Tensor<T>],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    T: Element,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if params.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::contract("finite_difference_check needs a scalar function"));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![T::zero(); p.len()], Tensor::into_data))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_param = (max_coords / params.len()).max(1);
    let mut worst = 0.0f64;
    let mut eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = perturbed
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0].widen())
    };

    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let count = per_param.min(p.len());
        for idx in sample(&mut rng, p.len(), count) {
            let orig = p.data()[idx];
            let (hi, lo) = (orig + T::lit(h), orig - T::lit(h));
            work[pi].data_mut()[idx] = hi;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = lo;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;

            // the representable step, not the nominal 2h
            let numeric = (plus - minus) / (hi.widen() - lo.widen());
            let a = analytic[pi][idx].widen();
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
