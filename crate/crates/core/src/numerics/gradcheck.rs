//! Central-difference verification of reverse-mode gradients.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar(v: Var<'_>) -> Result<f64> {
    let val = v.value();
    if val.numel() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar function, got {:?}", val.shape())));
    }
    let y = val.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    Ok(y)
}

/// Maximum relative error between the reverse-mode gradient of `f` at `x`
/// and central differences with step `h`. The relative error of one
/// coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    let g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&g, xv);
    eval_scalar(y)?;
    let analytic = g
        .backward(y)?
        .wrt(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = {
            let g = Graph::new();
            let v = g.variable(plus);
            eval_scalar(f(&g, v))?
        };
        let fm = {
            let g = Graph::new();
            let v = g.variable(minus);
            eval_scalar(f(&g, v))?
        };
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`], but perturbs parameters of `store` in place.
/// `coords_per_param` caps how many coordinates of each parameter are
/// probed (evenly strided); `None` probes all.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    coords_per_param: Option<usize>,
    h: f64,
    f: F,
) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph) -> Var<'g>,
{
    let grads = {
        let g = Graph::with_params(store);
        let y = f(&g);
        eval_scalar(y)?;
        g.backward(y)?.into_param_grads()
    };
    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.value(id).numel();
        let stride = coords_per_param.map_or(1, |c| (n / c.max(1)).max(1));
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let fp = {
                let g = Graph::with_params(store);
                eval_scalar(f(&g))?
            };
            store.value_mut(id).data_mut()[i] = orig - h;
            let fm = {
                let g = Graph::with_params(store);
                eval_scalar(f(&g))?
            };
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |t| t.data()[i]);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    Ok(worst)
}
