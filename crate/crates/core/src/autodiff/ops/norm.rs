//! Layer, group and batch normalization.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check_affine<T: Real>(what: &str, c: usize, gamma: &Var<T>, beta: &Var<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "{what}: affine {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Shared backward for "normalize, then per-channel affine".
///
/// `groups_of(c, n)` names the statistics group of element `(c, n)`; `xhat`
/// and `rstd` are the saved normalized input and per-group inverse std.
struct Saved<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    count: T,
}

fn affine_backward<T: Real>(
    g: &Tensor<T>,
    p: &[Var<T>],
    saved: &Saved<T>,
    channels: usize,
    positions: usize,
    group_of: impl Fn(usize, usize) -> usize,
    ngroups: usize,
) -> Vec<Option<Tensor<T>>> {
    let gd = g.data();
    let gamma = p[1].value().data();
    let gx = p[0].requires_grad().then(|| {
        let mut sum_d = vec![T::zero(); ngroups];
        let mut sum_dx = vec![T::zero(); ngroups];
        for c in 0..channels {
            for n in 0..positions {
                let i = c * positions + n;
                let d = gd[i] * gamma[c];
                let s = group_of(c, n);
                sum_d[s] += d;
                sum_dx[s] += d * saved.xhat[i];
            }
        }
        let mut gx = vec![T::zero(); channels * positions];
        for c in 0..channels {
            for n in 0..positions {
                let i = c * positions + n;
                let s = group_of(c, n);
                let d = gd[i] * gamma[c];
                gx[i] = saved.rstd[s] / saved.count
                    * (saved.count * d - sum_d[s] - saved.xhat[i] * sum_dx[s]);
            }
        }
        Tensor::from_vec(p[0].shape(), gx).expect("norm gx")
    });
    let ggamma = p[1].requires_grad().then(|| {
        let v = (0..channels)
            .map(|c| {
                (0..positions)
                    .map(|n| gd[c * positions + n] * saved.xhat[c * positions + n])
                    .sum()
            })
            .collect();
        Tensor::from_vec(&[channels], v).expect("norm ggamma")
    });
    let gbeta = p[2].requires_grad().then(|| {
        let v = gd.chunks(positions.max(1)).map(|r| r.iter().copied().sum()).collect();
        Tensor::from_vec(&[channels], v).expect("norm gbeta")
    });
    vec![gx, ggamma, gbeta]
}

fn normalize_affine<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    channels: usize,
    positions: usize,
    group_of: &impl Fn(usize, usize) -> usize,
    ngroups: usize,
    count: usize,
    eps: T,
) -> (Vec<T>, Saved<T>) {
    let cnt = T::from(count).expect("count");
    let mut mean = vec![T::zero(); ngroups];
    for c in 0..channels {
        for n in 0..positions {
            mean[group_of(c, n)] += x[c * positions + n];
        }
    }
    mean.iter_mut().for_each(|m| *m /= cnt);
    let mut var = vec![T::zero(); ngroups];
    for c in 0..channels {
        for n in 0..positions {
            let s = group_of(c, n);
            let d = x[c * positions + n] - mean[s];
            var[s] += d * d;
        }
    }
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v / cnt + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); channels * positions];
    let mut y = vec![T::zero(); channels * positions];
    for c in 0..channels {
        for n in 0..positions {
            let i = c * positions + n;
            let s = group_of(c, n);
            xhat[i] = (x[i] - mean[s]) * rstd[s];
            y[i] = gamma[c] * xhat[i] + beta[c];
        }
    }
    (y, Saved { xhat, rstd, count: cnt })
}

/// Layer normalization across the leading (channel) axis at every position.
pub fn layer_norm_ch<T: Real>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
    let xs = x.shape();
    if xs.is_empty() {
        return Err(Error::shape("layer_norm_ch on a scalar"));
    }
    let c = xs[0];
    check_affine("layer_norm_ch", c, gamma, beta)?;
    let n: usize = xs[1..].iter().product();
    let group_of = |_c: usize, pos: usize| pos;
    let (y, saved) = normalize_affine(
        x.value().data(),
        gamma.value().data(),
        beta.value().data(),
        c,
        n,
        &group_of,
        n,
        c,
        T::lit(eps),
    );
    Ok(Var::from_op(
        Tensor::from_vec(xs, y)?,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, p, _| affine_backward(g, p, &saved, c, n, |_c, pos| pos, n)),
    ))
}

/// Group normalization of `[C, A, B]` with statistics per (channel group, `b`)
/// over the group's channels and the whole `A` axis. With `B` = frequency
/// this treats every frequency bin as its own sample, as a convolution along
/// time with frequency folded into the batch would.
pub fn group_norm<T: Real>(
    x: &Var<T>,
    groups: usize,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: f64,
) -> Result<Var<T>> {
    let xs = x.shape();
    if xs.len() != 3 || groups == 0 || xs[0] % groups != 0 {
        return Err(Error::shape(format!(
            "group_norm: {xs:?} with {groups} groups"
        )));
    }
    let (c, a, b) = (xs[0], xs[1], xs[2]);
    check_affine("group_norm", c, gamma, beta)?;
    let per = c / groups;
    let n = a * b;
    let group_of = move |ch: usize, pos: usize| (ch / per) * b + pos % b;
    let (y, saved) = normalize_affine(
        x.value().data(),
        gamma.value().data(),
        beta.value().data(),
        c,
        n,
        &group_of,
        groups * b,
        per * a,
        T::lit(eps),
    );
    Ok(Var::from_op(
        Tensor::from_vec(xs, y)?,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, p, _| affine_backward(g, p, &saved, c, n, group_of, groups * b)),
    ))
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var: Tensor<T>,
}

/// Training-mode batch normalization over every non-channel position of
/// `x: [C, ...]`, using the statistics of the input itself.
pub fn batch_norm_train<T: Real>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: f64,
) -> Result<(Var<T>, BatchStats<T>)> {
    let xs = x.shape();
    if xs.is_empty() {
        return Err(Error::shape("batch_norm on a scalar"));
    }
    let c = xs[0];
    check_affine("batch_norm", c, gamma, beta)?;
    let n: usize = xs[1..].iter().product();
    let xd = x.value().data();
    let mean: Vec<T> = xd
        .chunks(n.max(1))
        .map(|r| r.iter().copied().sum::<T>() / T::from(n).expect("n"))
        .collect();
    let unbiased: Vec<T> = xd
        .chunks(n.max(1))
        .zip(&mean)
        .map(|(r, &m)| {
            let ss: T = r.iter().map(|&v| (v - m) * (v - m)).sum();
            ss / T::from(n.saturating_sub(1).max(1)).expect("n")
        })
        .collect();
    let group_of = |ch: usize, _pos: usize| ch;
    let (y, saved) = normalize_affine(
        xd,
        gamma.value().data(),
        beta.value().data(),
        c,
        n,
        &group_of,
        c,
        n,
        T::lit(eps),
    );
    let stats = BatchStats {
        mean: Tensor::from_vec(&[c], mean)?,
        var: Tensor::from_vec(&[c], unbiased)?,
    };
    let out = Var::from_op(
        Tensor::from_vec(xs, y)?,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, p, _| affine_backward(g, p, &saved, c, n, |ch, _| ch, c)),
    );
    Ok((out, stats))
}

/// Inference-mode batch normalization with fixed running statistics.
pub fn batch_norm_eval<T: Real>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var<T>> {
    let xs = x.shape();
    if xs.is_empty() {
        return Err(Error::shape("batch_norm on a scalar"));
    }
    let c = xs[0];
    check_affine("batch_norm", c, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape("batch_norm: running statistics shape"));
    }
    let n: usize = xs[1..].iter().product();
    let eps = T::lit(eps);
    let rstd: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let mean = running_mean.data().to_vec();
    let xhat: Vec<T> = x
        .value()
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i / n.max(1)]) * rstd[i / n.max(1)])
        .collect();
    let gd = gamma.value().data();
    let bd = beta.value().data();
    let y: Vec<T> = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| gd[i / n.max(1)] * v + bd[i / n.max(1)])
        .collect();
    Ok(Var::from_op(
        Tensor::from_vec(xs, y)?,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, p, _| {
            let gdat = g.data();
            let gamma = p[1].value().data();
            let gx = p[0].requires_grad().then(|| {
                let v = gdat
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * gamma[i / n.max(1)] * rstd[i / n.max(1)])
                    .collect();
                Tensor::from_vec(p[0].shape(), v).expect("bn gx")
            });
            let ggamma = p[1].requires_grad().then(|| {
                let v = (0..c)
                    .map(|ch| (0..n).map(|k| gdat[ch * n + k] * xhat[ch * n + k]).sum())
                    .collect();
                Tensor::from_vec(&[c], v).expect("bn ggamma")
            });
            let gbeta = p[2].requires_grad().then(|| {
                let v = gdat.chunks(n.max(1)).map(|r| r.iter().copied().sum()).collect();
                Tensor::from_vec(&[c], v).expect("bn gbeta")
            });
            vec![gx, ggamma, gbeta]
        }),
    ))
}
