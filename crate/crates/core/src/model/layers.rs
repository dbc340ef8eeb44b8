//! Parameterized layers resolved by name through a [`Ctx`].

use rand::Rng;

use crate::autodiff::ops::{self, ConvAxis};
use crate::autodiff::Var;
use crate::error::Result;
use crate::model::params::{Ctx, Mode};
use crate::tensor::{Real, Tensor};

pub fn linear<T: Real>(ctx: &Ctx<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    ops::linear_ch(x, &w, Some(&b))
}

pub fn conv<T: Real>(ctx: &Ctx<T>, prefix: &str, x: &Var<T>, groups: usize, axis: ConvAxis) -> Result<Var<T>> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    ops::conv1d(x, &w, Some(&b), groups, axis)
}

pub fn layer_norm<T: Real>(ctx: &Ctx<T>, prefix: &str, x: &Var<T>, eps: f64) -> Result<Var<T>> {
    let g = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    ops::layer_norm_ch(x, &g, &b, eps)
}

pub fn group_norm<T: Real>(ctx: &Ctx<T>, prefix: &str, x: &Var<T>, groups: usize, eps: f64) -> Result<Var<T>> {
    let g = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    ops::group_norm(x, groups, &g, &b, eps)
}

pub fn prelu<T: Real>(ctx: &Ctx<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let a = ctx.param(&format!("{prefix}.weight"))?;
    ops::prelu(x, &a)
}

/// Batch normalization over every non-channel position. Training mode uses
/// the statistics of `x` and records them for the running averages.
pub fn batch_norm<T: Real>(ctx: &Ctx<T>, prefix: &str, x: &Var<T>, eps: f64) -> Result<Var<T>> {
    let g = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    match ctx.mode() {
        Mode::Train => {
            let (y, stats) = ops::batch_norm_train(x, &g, &b, eps)?;
            ctx.record_update(format!("{prefix}.running_mean"), stats.mean);
            ctx.record_update(format!("{prefix}.running_var"), stats.var);
            Ok(y)
        }
        Mode::Eval => {
            let rm = ctx.buffer(&format!("{prefix}.running_mean"))?;
            let rv = ctx.buffer(&format!("{prefix}.running_var"))?;
            ops::batch_norm_eval(x, &g, &b, rm, rv, eps)
        }
    }
}

/// Inverted dropout; the identity in eval mode or at rate 0.
pub fn dropout<T: Real>(ctx: &Ctx<T>, x: &Var<T>, rate: f64) -> Result<Var<T>> {
    if ctx.mode() == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = ctx.with_rng(|rng| {
        Tensor::from_fn(x.shape(), |_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
    });
    ops::mul_const(x, &mask)
}
