//! Differentiable STFT and inverse STFT.

use crate::autodiff::Var;
use crate::dsp::{istft_planes, istft_planes_adjoint, stft_planes, stft_planes_adjoint, StftConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// STFT of a waveform `[N]` as `[2, M, F]` real/imaginary planes.
pub fn stft<T: Real>(x: &Var<T>, cfg: &StftConfig) -> Result<Var<T>> {
    if x.shape().len() != 1 || x.shape()[0] == 0 {
        return Err(Error::shape(format!("stft expects [N], got {:?}", x.shape())));
    }
    let len = x.shape()[0];
    let frames = cfg.num_frames(len);
    let bins = cfg.num_bins();
    let out = Tensor::from_vec(&[2, frames, bins], stft_planes(x.value().data(), cfg))?;
    let cfg = *cfg;
    Ok(Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let gx = stft_planes_adjoint(g.data(), len, &cfg);
            vec![Some(Tensor::from_vec(&[len], gx).expect("stft grad"))]
        }),
    ))
}

/// Inverse STFT of `[2, M, F]` planes to a waveform of `out_len` samples.
pub fn istft<T: Real>(spec: &Var<T>, cfg: &StftConfig, out_len: usize) -> Result<Var<T>> {
    let s = spec.shape();
    if s.len() != 3 || s[0] != 2 || s[2] != cfg.num_bins() {
        return Err(Error::shape(format!(
            "istft expects [2, M, {}], got {s:?}",
            cfg.num_bins()
        )));
    }
    let frames = s[1];
    let y = istft_planes(spec.value().data(), frames, cfg, out_len)?;
    let shape = s.to_vec();
    let cfg = *cfg;
    Ok(Var::from_op(
        Tensor::from_vec(&[out_len], y)?,
        vec![spec.clone()],
        Box::new(move |g, _, _| {
            let gs = istft_planes_adjoint(g.data(), frames, &cfg);
            vec![Some(Tensor::from_vec(&shape, gs).expect("istft grad"))]
        }),
    ))
}
