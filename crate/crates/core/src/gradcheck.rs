//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative gradient error used throughout: `|a − n| / max(1, |a|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("fd_check objective"));
    }
    Ok(v)
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences with `step`, returning the largest relative error.
pub fn fd_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of a model loss with respect to stored parameters.
///
/// `f` builds the loss on a fresh tape from `store`. At most `per_param`
/// randomly chosen elements of each listed parameter are perturbed.
pub fn fd_check_params<F>(
    f: F,
    store: &ParamStore,
    names: &[&str],
    per_param: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    tape.accumulate_param_grads(&mut with_grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let out = f(&mut tape, s)?;
        scalar_of(&tape, out)
    };
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for &name in names {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        let n = t.numel();
        let grad = with_grads.get(name).and_then(Tensor::grad).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in sample(rng, n, per_param.min(n)) {
            let orig = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * step)));
        }
    }
    Ok(worst)
}
