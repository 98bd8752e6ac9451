#![allow(dead_code)]

use deformtrace::gradcheck::{param_grad_check, ParamCheck};
use deformtrace::nn::{Cx, ParamStore};
use deformtrace::{Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Derivatives below this are compared absolutely; finite differences at
/// `STEP` cannot resolve them relatively.
pub const FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, &mut rng(seed))
}

/// Scalar probe `Σ y ⊙ W` with a fixed random `W`, so every output
/// coordinate reaches the loss with a distinct weight.
pub fn probe(cx: &mut Cx, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(cx.g.shape(y), -1.0, 1.0, seed);
    let w = cx.constant(w);
    let p = cx.g.mul(y, w)?;
    Ok(cx.g.sum(p))
}

/// Tape gradients of `f` against central differences on every parameter
/// tensor (`per_tensor` coordinates each).
pub fn check_params<F>(store: &ParamStore, f: F, per_tensor: usize) -> ParamCheck
where
    F: Fn(&mut Cx) -> Result<Var>,
{
    let mut cx = Cx::train(store);
    let loss = f(&mut cx).unwrap();
    let grads = cx.backward(loss).unwrap();
    param_grad_check(
        store,
        &grads,
        |s| {
            let mut cx = Cx::eval(s);
            let l = f(&mut cx)?;
            Ok(cx.g.item(l))
        },
        STEP,
        per_tensor,
        FLOOR,
        17,
    )
    .unwrap()
}
