//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Grads, ParamStore};
use crate::tensor::Tensor;

/// Relative error used throughout: `|a − n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of `x` and returns the worst relative
/// error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    if !g.value(loss).is_finite() {
        return Err(Error::Numeric("function is not finite at the probe point".into()));
    }
    g.backward(loss)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let l = f(&mut g, v)?;
        let y = g.item(l);
        if !y.is_finite() {
            return Err(Error::Numeric("function is not finite at a probe point".into()));
        }
        Ok(y)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Worst coordinate found by [`param_grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub worst: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `grads` (the tape gradient of `loss` at `store`) with central
/// differences of `loss` on up to `per_tensor` seeded coordinates of every
/// parameter. Errors are `|a − n| / max(|a| + |n|, floor)`, so coordinates
/// whose true derivative is below round-off are judged absolutely.
pub fn param_grad_check<F>(
    store: &ParamStore,
    grads: &Grads,
    loss: F,
    h: f64,
    per_tensor: usize,
    floor: f64,
    seed: u64,
) -> Result<ParamCheck>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut out = ParamCheck { worst: 0.0, worst_param: String::new(), analytic: 0.0, numeric: 0.0, checked: 0 };
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let picks = sample(&mut rng, n, per_tensor.min(n)).into_vec();
        for i in picks {
            let base = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = base + h;
            let up = loss(&work)?;
            work.get_mut(id).data_mut()[i] = base - h;
            let down = loss(&work)?;
            work.get_mut(id).data_mut()[i] = base;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::Numeric(format!("loss not finite around {}[{i}]", store.name(id))));
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor);
            out.checked += 1;
            if err > out.worst || out.worst_param.is_empty() {
                out = ParamCheck { worst: err, worst_param: format!("{}[{i}]", store.name(id)), analytic, numeric, checked: out.checked };
            }
        }
    }
    Ok(out)
}
