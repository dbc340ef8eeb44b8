//! Dense affine maps.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

/// Pointwise affine map over the leading (channel) axis.
///
/// `x: [Cin, ...]`, `weight: [Cout, Cin]`, `bias: [Cout]` gives `[Cout, ...]`,
/// i.e. a kernel-size-1 convolution applied at every remaining position.
pub fn linear_ch<T: Real>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
    let xs = x.shape().to_vec();
    let ws = weight.shape();
    if xs.is_empty() || ws.len() != 2 || ws[1] != xs[0] {
        return Err(Error::shape(format!(
            "linear_ch: input {xs:?} vs weight {ws:?}"
        )));
    }
    let (cout, cin) = (ws[0], ws[1]);
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(format!(
                "linear_ch: bias {:?} for {cout} outputs",
                b.shape()
            )));
        }
    }
    let n: usize = xs[1..].iter().product();
    let mut out_shape = xs.clone();
    out_shape[0] = cout;
    let mut y = Tensor::zeros(&out_shape);
    if let Some(b) = bias {
        for (row, &bv) in y.data_mut().chunks_mut(n.max(1)).zip(b.value().data()) {
            row.iter_mut().for_each(|v| *v = bv);
        }
    }
    gemm(
        cout,
        cin,
        n,
        T::one(),
        MatRef::rows(weight.value().data(), 0, cin),
        MatRef::rows(x.value().data(), 0, n),
        if bias.is_some() { T::one() } else { T::zero() },
        MatMut::rows(y.data_mut(), 0, n),
    );
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Var::from_op(
        y,
        parents,
        Box::new(move |g, p, _| {
            let gd = g.data();
            let gx = p[0].requires_grad().then(|| {
                let mut gx = Tensor::zeros(p[0].shape());
                gemm(
                    cin,
                    cout,
                    n,
                    T::one(),
                    MatRef::rows_t(p[1].value().data(), 0, cin),
                    MatRef::rows(gd, 0, n),
                    T::zero(),
                    MatMut::rows(gx.data_mut(), 0, n),
                );
                gx
            });
            let gw = p[1].requires_grad().then(|| {
                let mut gw = Tensor::zeros(p[1].shape());
                gemm(
                    cout,
                    n,
                    cin,
                    T::one(),
                    MatRef::rows(gd, 0, n),
                    MatRef::rows_t(p[0].value().data(), 0, n),
                    T::zero(),
                    MatMut::rows(gw.data_mut(), 0, cin),
                );
                gw
            });
            let mut out = vec![gx, gw];
            if p.len() == 3 {
                out.push(p[2].requires_grad().then(|| {
                    let sums = gd.chunks(n.max(1)).map(|r| r.iter().copied().sum()).collect();
                    Tensor::from_vec(&[cout], sums).expect("bias grad")
                }));
            }
            out
        }),
    ))
}

/// Independent affine map per leading-axis group over the last axis.
///
/// `x: [G, R, Din]`, `weight: [G, Dout, Din]`, `bias: [G, Dout]` gives
/// `[G, R, Dout]` with `y[g] = x[g] · weight[g]ᵀ + bias[g]`.
pub fn grouped_linear_last<T: Real>(x: &Var<T>, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 3 || ws.len() != 3 || ws[0] != xs[0] || ws[2] != xs[2] {
        return Err(Error::shape(format!(
            "grouped_linear_last: input {xs:?} vs weight {ws:?}"
        )));
    }
    let (groups, rows, din, dout) = (xs[0], xs[1], xs[2], ws[1]);
    if bias.shape() != [groups, dout] {
        return Err(Error::shape(format!(
            "grouped_linear_last: bias {:?}",
            bias.shape()
        )));
    }
    let mut y = Tensor::zeros(&[groups, rows, dout]);
    {
        let xd = x.value().data();
        let wd = weight.value().data();
        let bd = bias.value().data();
        par::for_each_chunk_mut(y.data_mut(), rows * dout, |g, out| {
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(&bd[g * dout..(g + 1) * dout]);
            }
            gemm(
                rows,
                din,
                dout,
                T::one(),
                MatRef::rows(xd, g * rows * din, din),
                MatRef::rows_t(wd, g * dout * din, din),
                T::one(),
                MatMut::rows(out, 0, dout),
            );
        });
    }
    Ok(Var::from_op(
        y,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, p, _| {
            let gd = g.data();
            let gx = p[0].requires_grad().then(|| {
                let mut gx = Tensor::zeros(p[0].shape());
                let wd = p[1].value().data();
                par::for_each_chunk_mut(gx.data_mut(), rows * din, |gi, out| {
                    gemm(
                        rows,
                        dout,
                        din,
                        T::one(),
                        MatRef::rows(gd, gi * rows * dout, dout),
                        MatRef::rows(wd, gi * dout * din, din),
                        T::zero(),
                        MatMut::rows(out, 0, din),
                    );
                });
                gx
            });
            let gw = p[1].requires_grad().then(|| {
                let mut gw = Tensor::zeros(p[1].shape());
                let xd = p[0].value().data();
                par::for_each_chunk_mut(gw.data_mut(), dout * din, |gi, out| {
                    gemm(
                        dout,
                        rows,
                        din,
                        T::one(),
                        MatRef::rows_t(gd, gi * rows * dout, dout),
                        MatRef::rows(xd, gi * rows * din, din),
                        T::zero(),
                        MatMut::rows(out, 0, din),
                    );
                });
                gw
            });
            let gb = p[2].requires_grad().then(|| {
                let mut gb = Tensor::zeros(p[2].shape());
                for gi in 0..groups {
                    for r in 0..rows {
                        let row = &gd[(gi * rows + r) * dout..(gi * rows + r + 1) * dout];
                        for (acc, &v) in gb.data_mut()[gi * dout..(gi + 1) * dout].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                gb
            });
            vec![gx, gw, gb]
        }),
    ))
}

/// `x · a` for `x: [R, K]` and a constant matrix `a: [K, N]`.
pub fn matmul_const<T: Real>(x: &Var<T>, a: &Tensor<T>) -> Result<Var<T>> {
    let xs = x.shape();
    if xs.len() != 2 || a.ndim() != 2 || xs[1] != a.dim(0) {
        return Err(Error::shape(format!(
            "matmul_const: {xs:?} x {:?}",
            a.shape()
        )));
    }
    let (r, k, n) = (xs[0], xs[1], a.dim(1));
    let mut y = Tensor::zeros(&[r, n]);
    gemm(
        r,
        k,
        n,
        T::one(),
        MatRef::rows(x.value().data(), 0, k),
        MatRef::rows(a.data(), 0, n),
        T::zero(),
        MatMut::rows(y.data_mut(), 0, n),
    );
    let a = a.clone();
    Ok(Var::from_op(
        y,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut gx = Tensor::zeros(&[r, k]);
            gemm(
                r,
                n,
                k,
                T::one(),
                MatRef::rows(g.data(), 0, n),
                MatRef::rows_t(a.data(), 0, n),
                T::zero(),
                MatMut::rows(gx.data_mut(), 0, k),
            );
            vec![Some(gx)]
        }),
    ))
}
