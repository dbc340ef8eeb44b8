//! Separator block: narrow-band, cross-band and global attention modules on
//! `[H, M, F]` features.

use crate::autodiff::ops::{self, ConvAxis};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::layers::{conv, dropout, group_norm, layer_norm, linear, prelu};
use crate::model::{Ctx, ModelConfig};
use crate::tensor::Real;

fn dims<T: Real>(x: &Var<T>, cfg: &ModelConfig) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[0] != cfg.hidden {
        return Err(Error::shape(format!(
            "block input must be [{}, M, F], got {s:?}",
            cfg.hidden
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// Multi-head attention along time, independently for every frequency bin.
fn time_attention<T: Real>(
    ctx: &Ctx<T>,
    prefix: &str,
    x: &Var<T>,
    heads: usize,
) -> Result<Var<T>> {
    let (h, m, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = h / heads;
    // [H, M, F] -> [heads, dh, M, F] -> [F, heads, M, dh] -> [F·heads, M, dh]
    let split = |v: Var<T>| -> Result<Var<T>> {
        let v = ops::reshape(&v, &[heads, dh, m, f])?;
        let v = ops::permute(&v, &[3, 0, 2, 1])?;
        ops::reshape(&v, &[f * heads, m, dh])
    };
    let q = split(linear(ctx, &format!("{prefix}.q"), x)?)?;
    let k = split(linear(ctx, &format!("{prefix}.k"), x)?)?;
    let v = split(linear(ctx, &format!("{prefix}.v"), x)?)?;
    let o = ops::attention(&q, &k, &v, T::lit(1.0 / (dh as f64).sqrt()))?;
    let o = ops::reshape(&o, &[f, heads, m, dh])?;
    let o = ops::permute(&o, &[1, 3, 2, 0])?;
    let o = ops::reshape(&o, &[h, m, f])?;
    linear(ctx, &format!("{prefix}.out"), &o)
}

/// `u = x + LN(MHSA(LN(x)))`, then
/// `u + Dropout(Linear(GN(TGConv(SiLU(Linear(LN(u)))))))`.
pub fn narrowband_forward<T: Real>(
    ctx: &Ctx<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: &Var<T>,
) -> Result<Var<T>> {
    dims(x, cfg)?;
    let p = |s: &str| format!("{prefix}.{s}");
    let eps = cfg.norm_eps;
    let a = layer_norm(ctx, &p("ln_in"), x, eps)?;
    let a = time_attention(ctx, &p("attn"), &a, cfg.heads)?;
    let a = layer_norm(ctx, &p("ln_attn"), &a, eps)?;
    let u = ops::add(x, &a)?;

    let h = layer_norm(ctx, &p("ln_ffn"), &u, eps)?;
    let h = ops::silu(&linear(ctx, &p("ffn.up"), &h)?);
    let h = conv(ctx, &p("ffn.tconv"), &h, cfg.groups, ConvAxis::Leading)?;
    let h = group_norm(ctx, &p("ffn.gn"), &h, cfg.groups, eps)?;
    let h = linear(ctx, &p("ffn.down"), &h)?;
    let h = dropout(ctx, &h, cfg.dropout)?;
    ops::add(&u, &h)
}

fn frequency_conv_component<T: Real>(
    ctx: &Ctx<T>,
    cfg: &ModelConfig,
    prefix: &str,
    idx: usize,
    x: &Var<T>,
) -> Result<Var<T>> {
    let h = layer_norm(ctx, &format!("{prefix}.ln{idx}"), x, cfg.norm_eps)?;
    let h = conv(ctx, &format!("{prefix}.fgconv{idx}"), &h, cfg.groups, ConvAxis::Trailing)?;
    let h = prelu(ctx, &format!("{prefix}.prelu{idx}"), &h)?;
    ops::add(x, &h)
}

/// Shared full-band maps stacked as `[H′, F, F]` weights and `[H′, F]` biases.
fn shared_fullband<T: Real>(ctx: &Ctx<T>, cfg: &ModelConfig, f: usize) -> Result<(Var<T>, Var<T>)> {
    let mut ws = Vec::with_capacity(cfg.bottleneck);
    let mut bs = Vec::with_capacity(cfg.bottleneck);
    for i in 0..cfg.bottleneck {
        ws.push(ops::reshape(&ctx.param(&format!("shared.fullband.{i}.weight"))?, &[1, f, f])?);
        bs.push(ops::reshape(&ctx.param(&format!("shared.fullband.{i}.bias"))?, &[1, f])?);
    }
    Ok((ops::concat(&ws, 0)?, ops::concat(&bs, 0)?))
}

/// Frequency convolution component, full-band linear component (with the
/// maps shared by every block), second frequency convolution component.
pub fn crossband_forward<T: Real>(
    ctx: &Ctx<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: &Var<T>,
) -> Result<Var<T>> {
    let (_, _, f) = dims(x, cfg)?;
    let a = frequency_conv_component(ctx, cfg, prefix, 1, x)?;

    let t = ops::silu(&linear(ctx, &format!("{prefix}.down"), &a)?);
    let (w, b) = shared_fullband(ctx, cfg, f)?;
    let t = ops::grouped_linear_last(&t, &w, &b)?;
    let t = ops::silu(&linear(ctx, &format!("{prefix}.up"), &t)?);
    let b = ops::add(&a, &t)?;

    frequency_conv_component(ctx, cfg, prefix, 2, &b)
}

/// Global attention over whole frames: every frame is one token holding all
/// frequencies of a head's channels.
pub fn gmhsa_forward<T: Real>(
    ctx: &Ctx<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: &Var<T>,
) -> Result<Var<T>> {
    let (h, m, f) = dims(x, cfg)?;
    let (l, e) = (cfg.heads, cfg.embed());
    let dv = h / l;
    let z = linear(ctx, &format!("{prefix}.conv_in"), x)?;
    // [L·c, M, F] -> [L, c, M, F] -> [L, M, c, F] -> [L, M, c·F]
    let tokens = |start: usize, c: usize| -> Result<Var<T>> {
        let t = ops::slice(&z, 0, start, l * c)?;
        let t = ops::reshape(&t, &[l, c, m, f])?;
        let t = ops::permute(&t, &[0, 2, 1, 3])?;
        ops::reshape(&t, &[l, m, c * f])
    };
    let q = tokens(0, e)?;
    let k = tokens(l * e, e)?;
    let v = tokens(2 * l * e, dv)?;
    let o = ops::attention(&q, &k, &v, T::lit(1.0 / ((e * f) as f64).sqrt()))?;
    let o = ops::reshape(&o, &[l, m, dv, f])?;
    let o = ops::permute(&o, &[0, 2, 1, 3])?;
    let o = ops::reshape(&o, &[h, m, f])?;
    let o = linear(ctx, &format!("{prefix}.conv_out"), &o)?;
    let o = prelu(ctx, &format!("{prefix}.prelu"), &o)?;
    let o = layer_norm(ctx, &format!("{prefix}.ln"), &o, cfg.norm_eps)?;
    ops::add(x, &o)
}

/// Narrow-band, cross-band, then global attention module of block `index`.
pub fn block_forward<T: Real>(
    ctx: &Ctx<T>,
    cfg: &ModelConfig,
    index: usize,
    x: &Var<T>,
) -> Result<Var<T>> {
    let p = format!("block.{index}");
    let x = narrowband_forward(ctx, cfg, &format!("{p}.narrowband"), x)?;
    let x = crossband_forward(ctx, cfg, &format!("{p}.crossband"), &x)?;
    gmhsa_forward(ctx, cfg, &format!("{p}.gmhsa"), &x)
}
