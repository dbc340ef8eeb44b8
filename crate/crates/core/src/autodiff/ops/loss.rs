//! Fused scalar objectives with closed-form gradients.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Largest magnitude, in dB, reported by [`si_sdr_db`].
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Floor on the target magnitude L1 norm in [`magnitude_l1_ratio`].
pub const MAG_NORM_FLOOR: f64 = 1e-8;

/// `Σ | |est| - target_mag | / max(Σ target_mag, floor)`.
///
/// `est: [2, M, F]` real/imaginary planes, `target_mag: [M, F]`.
pub fn magnitude_l1_ratio<T: Real>(est: &Var<T>, target_mag: &Tensor<T>) -> Result<Var<T>> {
    let s = est.shape();
    if s.len() != 3 || s[0] != 2 || target_mag.shape() != &s[1..] {
        return Err(Error::shape(format!(
            "magnitude loss: estimate {s:?} vs target {:?}",
            target_mag.shape()
        )));
    }
    let n = s[1] * s[2];
    let denom = target_mag.sum().max(T::lit(MAG_NORM_FLOOR));
    let (re, im) = est.value().data().split_at(n);
    let mags: Vec<T> = re.iter().zip(im).map(|(&a, &b)| a.hypot(b)).collect();
    let total: T = mags
        .iter()
        .zip(target_mag.data())
        .map(|(&m, &t)| (m - t).abs())
        .sum();
    let target = target_mag.clone();
    Ok(Var::from_op(
        Tensor::scalar(total / denom),
        vec![est.clone()],
        Box::new(move |g, p, _| {
            let scale = g.item() / denom;
            let (re, im) = p[0].value().data().split_at(n);
            let mut grad = vec![T::zero(); 2 * n];
            for i in 0..n {
                let m = mags[i];
                if m > T::zero() {
                    let d = m - target.data()[i];
                    let sign = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    grad[i] = scale * sign * re[i] / m;
                    grad[n + i] = scale * sign * im[i] / m;
                }
            }
            vec![Some(Tensor::from_vec(p[0].shape(), grad).expect("mag grad"))]
        }),
    ))
}

/// Scale-invariant SDR in dB of `est` against `target` (larger is better),
/// clamped to `±SI_SDR_CAP_DB`. The target is rescaled by
/// `α = <target, est> / <target, target>` before measuring the residual.
pub fn si_sdr_db<T: Real>(est: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    if est.shape().len() != 1 || est.shape() != target.shape() {
        return Err(Error::shape(format!(
            "si-sdr: estimate {:?} vs target {:?}",
            est.shape(),
            target.shape()
        )));
    }
    let s = target.data();
    let e = est.value().data();
    let ss: T = s.iter().map(|&v| v * v).sum();
    if ss <= T::zero() {
        return Err(Error::Data("si-sdr target has zero energy".into()));
    }
    let se: T = s.iter().zip(e).map(|(&a, &b)| a * b).sum();
    let alpha = se / ss;
    let resid: Vec<T> = e.iter().zip(s).map(|(&x, &t)| x - alpha * t).collect();
    let num = alpha * alpha * ss;
    let den: T = resid.iter().map(|&v| v * v).sum();
    let cap = T::lit(SI_SDR_CAP_DB);
    let ratio_floor = T::lit(10f64.powf(-SI_SDR_CAP_DB / 10.0));
    let (value, clamped) = if den <= num * ratio_floor {
        (cap, true)
    } else if num <= den * ratio_floor {
        (-cap, true)
    } else {
        (T::lit(10.0) * (num / den).log10(), false)
    };
    let target = target.clone();
    Ok(Var::from_op(
        Tensor::scalar(value),
        vec![est.clone()],
        Box::new(move |g, _, _| {
            if clamped {
                return vec![Some(Tensor::zeros(target.shape()))];
            }
            let k = g.item() * T::lit(20.0 / std::f64::consts::LN_10);
            let grad: Vec<T> = target
                .data()
                .iter()
                .zip(&resid)
                .map(|(&t, &r)| k * (alpha * t / num - r / den))
                .collect();
            vec![Some(Tensor::from_vec(target.shape(), grad).expect("si-sdr grad"))]
        }),
    ))
}
