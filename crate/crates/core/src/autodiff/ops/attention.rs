//! Batched scaled dot-product attention.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

fn softmax_rows<T: Real>(s: &mut [T], t: usize) {
    for row in s.chunks_mut(t) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Attention weights `softmax(scale · q kᵀ)` of one batch entry.
pub fn attention_weights<T: Real>(q: &[T], k: &[T], t: usize, dk: usize, scale: T) -> Vec<T> {
    let mut s = vec![T::zero(); t * t];
    gemm(
        t,
        dk,
        t,
        scale,
        MatRef::rows(q, 0, dk),
        MatRef::rows_t(k, 0, dk),
        T::zero(),
        MatMut::rows(&mut s, 0, t),
    );
    softmax_rows(&mut s, t);
    s
}

/// `softmax(scale · q kᵀ) v` for every batch entry.
///
/// `q, k: [B, T, dk]`, `v: [B, T, dv]`, output `[B, T, dv]`. The attention
/// matrix of every batch entry is kept for the backward pass.
pub fn attention<T: Real>(q: &Var<T>, k: &Var<T>, v: &Var<T>, scale: T) -> Result<Var<T>> {
    let qs = q.shape();
    let vs = v.shape();
    if qs.len() != 3 || k.shape() != qs || vs.len() != 3 || vs[0] != qs[0] || vs[1] != qs[1] {
        return Err(Error::shape(format!(
            "attention: q {qs:?}, k {:?}, v {vs:?}",
            k.shape()
        )));
    }
    let (b, t, dk, dv) = (qs[0], qs[1], qs[2], vs[2]);
    let qd = q.value().data();
    let kd = k.value().data();
    let vd = v.value().data();
    let probs: Vec<Vec<T>> = par::map_indexed(b, |i| {
        attention_weights(&qd[i * t * dk..(i + 1) * t * dk], &kd[i * t * dk..(i + 1) * t * dk], t, dk, scale)
    });
    let mut out = Tensor::zeros(&[b, t, dv]);
    par::for_each_chunk_mut(out.data_mut(), t * dv, |i, o| {
        gemm(
            t,
            t,
            dv,
            T::one(),
            MatRef::rows(&probs[i], 0, t),
            MatRef::rows(vd, i * t * dv, dv),
            T::zero(),
            MatMut::rows(o, 0, dv),
        );
    });
    let keep = q.requires_grad() || k.requires_grad() || v.requires_grad();
    let probs = if keep { probs } else { Vec::new() };
    Ok(Var::from_op(
        out,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, p, _| {
            let gd = g.data();
            let qd = p[0].value().data();
            let kd = p[1].value().data();
            let vd = p[2].value().data();
            // Per batch entry: gV = Pᵀ gO, gS = P ⊙ (gP - rowsum(gP ⊙ P)) with
            // gP = gO Vᵀ, then gQ = scale gS K and gK = scale gSᵀ Q.
            let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_indexed(b, |i| {
                let pm = &probs[i];
                let go = &gd[i * t * dv..(i + 1) * t * dv];
                let mut gv = vec![T::zero(); t * dv];
                gemm(
                    t,
                    t,
                    dv,
                    T::one(),
                    MatRef::rows_t(pm, 0, t),
                    MatRef::rows(go, 0, dv),
                    T::zero(),
                    MatMut::rows(&mut gv, 0, dv),
                );
                let mut gs = vec![T::zero(); t * t];
                gemm(
                    t,
                    dv,
                    t,
                    T::one(),
                    MatRef::rows(go, 0, dv),
                    MatRef::rows_t(vd, i * t * dv, dv),
                    T::zero(),
                    MatMut::rows(&mut gs, 0, t),
                );
                for (grow, prow) in gs.chunks_mut(t).zip(pm.chunks(t)) {
                    let dot: T = grow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (gv_, &pv) in grow.iter_mut().zip(prow) {
                        *gv_ = pv * (*gv_ - dot);
                    }
                }
                let mut gq = vec![T::zero(); t * dk];
                gemm(
                    t,
                    t,
                    dk,
                    scale,
                    MatRef::rows(&gs, 0, t),
                    MatRef::rows(kd, i * t * dk, dk),
                    T::zero(),
                    MatMut::rows(&mut gq, 0, dk),
                );
                let mut gk = vec![T::zero(); t * dk];
                gemm(
                    t,
                    t,
                    dk,
                    scale,
                    MatRef::rows_t(&gs, 0, t),
                    MatRef::rows(qd, i * t * dk, dk),
                    T::zero(),
                    MatMut::rows(&mut gk, 0, dk),
                );
                (gq, gk, gv)
            });
            let mut gq = Vec::with_capacity(b * t * dk);
            let mut gk = Vec::with_capacity(b * t * dk);
            let mut gv = Vec::with_capacity(b * t * dv);
            for (a, bb, c) in parts {
                gq.extend(a);
                gk.extend(bb);
                gv.extend(c);
            }
            vec![
                p[0].requires_grad()
                    .then(|| Tensor::from_vec(p[0].shape(), gq).expect("gq")),
                p[1].requires_grad()
                    .then(|| Tensor::from_vec(p[1].shape(), gk).expect("gk")),
                p[2].requires_grad()
                    .then(|| Tensor::from_vec(p[2].shape(), gv).expect("gv")),
            ]
        }),
    ))
}
