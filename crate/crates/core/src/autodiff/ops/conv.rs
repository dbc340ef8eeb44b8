//! Grouped 1-D convolution with "same" zero padding along one spatial axis of
//! a `[C, A, B]` tensor. The other spatial axis acts as a batch axis.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

/// Which spatial axis of a `[C, A, B]` tensor the kernel slides along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvAxis {
    /// Axis `A` (time frames for `[C, M, F]` features).
    Leading,
    /// Axis `B` (frequency bins for `[C, M, F]` features).
    Trailing,
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    groups: usize,
    k: usize,
    pad: usize,
    a: usize,
    b: usize,
    axis: ConvAxis,
}

impl Geometry {
    fn padded_dims(&self) -> (usize, usize) {
        match self.axis {
            ConvAxis::Leading => (self.a + 2 * self.pad, self.b),
            ConvAxis::Trailing => (self.a, self.b + 2 * self.pad),
        }
    }

    fn flat_len(&self) -> usize {
        let (pa, pb) = self.padded_dims();
        pa * pb
    }

    fn step(&self) -> usize {
        match self.axis {
            ConvAxis::Leading => self.b,
            ConvAxis::Trailing => 1,
        }
    }

    /// Flat column range of the padded grid on which outputs are evaluated.
    fn range(&self) -> (usize, usize) {
        let s = self.pad * self.step();
        (s, self.flat_len() - s)
    }

    fn padded_index(&self, a: usize, b: usize) -> usize {
        let (_, pb) = self.padded_dims();
        match self.axis {
            ConvAxis::Leading => (a + self.pad) * pb + b,
            ConvAxis::Trailing => a * pb + b + self.pad,
        }
    }
}

fn pad_impl<T: Real>(geo: &Geometry, src: &[T], channels: usize) -> Vec<T> {
    let lp = geo.flat_len();
    let mut out = vec![T::zero(); channels * lp];
    for c in 0..channels {
        for a in 0..geo.a {
            let dst = c * lp + geo.padded_index(a, 0);
            let s = (c * geo.a + a) * geo.b;
            out[dst..dst + geo.b].copy_from_slice(&src[s..s + geo.b]);
        }
    }
    out
}

fn crop<T: Real>(geo: &Geometry, padded: &[T], channels: usize) -> Vec<T> {
    let lp = geo.flat_len();
    let mut out = Vec::with_capacity(channels * geo.a * geo.b);
    for c in 0..channels {
        for a in 0..geo.a {
            let s = c * lp + geo.padded_index(a, 0);
            out.extend_from_slice(&padded[s..s + geo.b]);
        }
    }
    out
}

/// Grouped convolution: `x: [Cin, A, B]`, `weight: [Cout, Cin/groups, K]`,
/// `bias: [Cout]`, odd `K`, output `[Cout, A, B]`.
pub fn conv1d<T: Real>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    groups: usize,
    axis: ConvAxis,
) -> Result<Var<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 3 || ws.len() != 3 {
        return Err(Error::shape(format!("conv1d: input {xs:?}, weight {ws:?}")));
    }
    let (cin, a, b) = (xs[0], xs[1], xs[2]);
    let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
        return Err(Error::shape(format!(
            "conv1d: {cin} -> {cout} channels not divisible into {groups} groups (weight {ws:?})"
        )));
    }
    if k % 2 == 0 {
        return Err(Error::shape(format!("conv1d: kernel size {k} must be odd")));
    }
    if let Some(bv) = bias {
        if bv.shape() != [cout] {
            return Err(Error::shape(format!("conv1d: bias {:?}", bv.shape())));
        }
    }
    let geo = Geometry {
        cin,
        cout,
        groups,
        k,
        pad: (k - 1) / 2,
        a,
        b,
        axis,
    };
    let cout_g = cout / groups;
    let lp = geo.flat_len();
    let (lo, hi) = geo.range();
    let step = geo.step();
    let xp = pad_impl(&geo, x.value().data(), cin);

    let mut yp = vec![T::zero(); cout * lp];
    {
        let wd = weight.value().data();
        let bd = bias.map(|bv| bv.value().data().to_vec());
        par::for_each_chunk_mut(&mut yp, cout_g * lp, |g, out| {
            if let Some(bd) = &bd {
                for o in 0..cout_g {
                    out[o * lp + lo..o * lp + hi]
                        .iter_mut()
                        .for_each(|v| *v = bd[g * cout_g + o]);
                }
            }
            for tap in 0..k {
                let shift = tap * step;
                gemm(
                    cout_g,
                    cin_g,
                    hi - lo,
                    T::one(),
                    MatRef {
                        data: wd,
                        offset: g * cout_g * cin_g * k + tap,
                        rs: cin_g * k,
                        cs: k,
                    },
                    MatRef {
                        data: &xp,
                        offset: g * cin_g * lp + shift,
                        rs: lp,
                        cs: 1,
                    },
                    T::one(),
                    MatMut {
                        data: out,
                        offset: lo,
                        rs: lp,
                        cs: 1,
                    },
                );
            }
        });
    }
    let y = Tensor::from_vec(&[cout, a, b], crop(&geo, &yp, cout))?;
    drop(yp);

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(bv) = bias {
        parents.push(bv.clone());
    }
    Ok(Var::from_op(
        y,
        parents,
        Box::new(move |g, p, _| {
            let geo = geo;
            let cin_g = geo.cin / geo.groups;
            let cout_g = geo.cout / geo.groups;
            let gp = pad_impl(&geo, g.data(), geo.cout);
            let gx = p[0].requires_grad().then(|| {
                let wd = p[1].value().data();
                let mut gxp = vec![T::zero(); geo.cin * lp];
                par::for_each_chunk_mut(&mut gxp, cin_g * lp, |gi, out| {
                    for tap in 0..geo.k {
                        let shift = tap * step;
                        gemm(
                            cin_g,
                            cout_g,
                            hi - lo,
                            T::one(),
                            MatRef {
                                data: wd,
                                offset: gi * cout_g * cin_g * geo.k + tap,
                                rs: geo.k,
                                cs: cin_g * geo.k,
                            },
                            MatRef {
                                data: &gp,
                                offset: gi * cout_g * lp + lo,
                                rs: lp,
                                cs: 1,
                            },
                            T::one(),
                            MatMut {
                                data: out,
                                offset: shift,
                                rs: lp,
                                cs: 1,
                            },
                        );
                    }
                });
                Tensor::from_vec(p[0].shape(), crop(&geo, &gxp, geo.cin)).expect("conv gx")
            });
            let gw = p[1].requires_grad().then(|| {
                let xp = pad_impl(&geo, p[0].value().data(), geo.cin);
                let mut gw = Tensor::zeros(p[1].shape());
                par::for_each_chunk_mut(gw.data_mut(), cout_g * cin_g * geo.k, |gi, out| {
                    for tap in 0..geo.k {
                        let shift = tap * step;
                        gemm(
                            cout_g,
                            hi - lo,
                            cin_g,
                            T::one(),
                            MatRef {
                                data: &gp,
                                offset: gi * cout_g * lp + lo,
                                rs: lp,
                                cs: 1,
                            },
                            MatRef {
                                data: &xp,
                                offset: gi * cin_g * lp + shift,
                                rs: 1,
                                cs: lp,
                            },
                            T::zero(),
                            MatMut {
                                data: out,
                                offset: tap,
                                rs: cin_g * geo.k,
                                cs: geo.k,
                            },
                        );
                    }
                });
                gw
            });
            let mut out = vec![gx, gw];
            if p.len() == 3 {
                out.push(p[2].requires_grad().then(|| {
                    let per = geo.a * geo.b;
                    let sums = g
                        .data()
                        .chunks(per.max(1))
                        .map(|c| c.iter().copied().sum())
                        .collect();
                    Tensor::from_vec(&[geo.cout], sums).expect("conv gb")
                }));
            }
            out
        }),
    ))
}
