//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of the relative error. Coordinates whose true gradient
/// is below this magnitude are effectively compared in absolute terms, since
/// the difference quotient itself carries ~1e-11 of round-off.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `f` with respect to each input against
/// `(f(x+eps) − f(x−eps)) / 2eps`, coordinate by coordinate, and reports the
/// worst relative error.
///
/// `f` may return a non-scalar; it is then contracted with fixed pseudo-random
/// weights so that every output coordinate contributes.
pub fn finite_diff_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    finite_diff_check_in(&ParamStore::new(), inputs, eps, f)
}

/// [`finite_diff_check`] with `f` free to reference parameters of `store`
/// (held fixed; only the explicit inputs are perturbed).
pub fn finite_diff_check_in<F>(store: &ParamStore, inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = scalarize(&mut g, out)?;
        let value = g.value(loss).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let per_input = vars
            .iter()
            .zip(values)
            .map(|(v, t)| grads.leaf(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, per_input))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for c in 0..input.len() {
            let orig = input.data()[c];
            probe[i].data_mut()[c] = orig + eps;
            let (plus, _) = eval(&probe, false)?;
            probe[i].data_mut()[c] = orig - eps;
            let (minus, _) = eval(&probe, false)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i].data()[c], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check against stored parameters.
///
/// `loss_fn` evaluates the loss for the current store and returns its value
/// together with the reverse-pass gradients. At most `max_coords` coordinates
/// per parameter are probed (evenly spaced).
pub fn finite_diff_check_params<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    max_coords: usize,
    eps: f64,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (_, grads) = loss_fn(store)?;
    let mut worst: f64 = 0.0;
    for &id in params {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let analytic = grads.param(id).cloned();
        for c in (0..n).step_by(stride) {
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[c]);
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + eps;
            let (plus, _) = loss_fn(store)?;
            store.value_mut(id).data_mut()[c] = orig - eps;
            let (minus, _) = loss_fn(store)?;
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

fn scalarize(g: &mut Graph<'_>, out: Var) -> Result<Var> {
    let t = g.value(out);
    if t.len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let weights = (0..t.len()).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = g.constant(Tensor::new(t.shape().to_vec(), weights)?);
    let weighted = g.mul(out, w)?;
    Ok(g.sum(weighted))
}
