//! Central finite-difference checks of hand-written gradients.

use serde::Serialize;

use crate::nn::Parameterized;

/// Worst agreement between analytic and numeric gradients for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Worst relative error at the requested step.
    pub max_rel_err: f64,
    /// Worst relative error after entries above [`RECHECK_ABOVE`] were
    /// retried at one and two decades smaller steps, keeping each entry's
    /// best agreement.
    pub confirmed_rel_err: f64,
    /// Entries that needed the retry.
    pub rechecked: usize,
    pub max_abs_grad: f64,
}

/// Entries whose error at the requested step exceeds this are retried at
/// smaller steps. A ReLU or clamp kink lying within one step of the point
/// spoils the difference quotient but not a smaller one; a wrong analytic
/// gradient disagrees at every step.
pub const RECHECK_ABOVE: f64 = 1e-3;

/// Relative error with an absolute floor below which both values count as zero.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Checks up to `per_param` evenly spaced entries of every parameter.
///
/// `f(model, backward)` must return the loss and, when `backward` is set,
/// accumulate its gradient into the zeroed parameter gradients. It is
/// evaluated on fresh clones so side effects (running statistics) do not
/// leak between evaluations.
pub fn check_gradients<M, F>(model: &M, step: f64, per_param: usize, floor: f64, mut f: F) -> Vec<ParamCheck>
where
    M: Parameterized + Clone,
    F: FnMut(&mut M, bool) -> f64,
{
    let mut base = model.clone();
    base.zero_grad();
    f(&mut base, true);
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    base.visit_params("", &mut |name, p| grads.push((name.to_string(), p.grad.clone())));

    let mut out = Vec::with_capacity(grads.len());
    for (name, grad) in &grads {
        let n = grad.len();
        let take = per_param.min(n);
        let mut worst = 0.0f64;
        let mut confirmed = 0.0f64;
        let mut rechecked = 0;
        for t in 0..take {
            let idx = if take == n { t } else { t * n / take };
            let mut eval = |delta: f64| {
                let mut m = model.clone();
                m.visit_params("", &mut |pn, p| {
                    if pn == name {
                        p.value[idx] += delta;
                    }
                });
                f(&mut m, false)
            };
            let mut err_at = |h: f64| rel_err(grad[idx], (eval(h) - eval(-h)) / (2.0 * h), floor);
            let err = err_at(step);
            worst = worst.max(err);
            let mut best = err;
            if err > RECHECK_ABOVE {
                rechecked += 1;
                best = best.min(err_at(step / 10.0)).min(err_at(step / 100.0));
            }
            confirmed = confirmed.max(best);
        }
        out.push(ParamCheck {
            name: name.clone(),
            checked: take,
            max_rel_err: worst,
            confirmed_rel_err: confirmed,
            rechecked,
            max_abs_grad: grad.iter().fold(0.0, |a: f64, g| a.max(g.abs())),
        });
    }
    out
}
