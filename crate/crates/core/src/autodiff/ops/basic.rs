//! Elementwise, activation and structural ops.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{inverse_permutation, Real, Tensor};

fn same_shape<T: Real>(what: &str, a: &Var<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("add", a, b.value())?;
    let out = a.value().zip_map(b.value(), |x, y| x + y);
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
    ))
}

pub fn sub<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("sub", a, b.value())?;
    let out = a.value().zip_map(b.value(), |x, y| x - y);
    Ok(Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scale(-T::one()))]),
    ))
}

/// `a * s` for a constant scalar `s`.
pub fn scale<T: Real>(a: &Var<T>, s: T) -> Var<T> {
    Var::from_op(
        a.value().scale(s),
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(g.scale(s))]),
    )
}

/// `a + c` for a constant tensor `c`.
pub fn add_const<T: Real>(a: &Var<T>, c: &Tensor<T>) -> Result<Var<T>> {
    same_shape("add_const", a, c)?;
    Ok(Var::from_op(
        a.value().zip_map(c, |x, y| x + y),
        vec![a.clone()],
        Box::new(|g, _, _| vec![Some(g.clone())]),
    ))
}

/// `a ⊙ c` for a constant tensor `c`.
pub fn mul_const<T: Real>(a: &Var<T>, c: &Tensor<T>) -> Result<Var<T>> {
    same_shape("mul_const", a, c)?;
    let c = c.clone();
    Ok(Var::from_op(
        a.value().zip_map(&c, |x, y| x * y),
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(g.zip_map(&c, |x, y| x * y))]),
    ))
}

pub fn relu<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        a.value().map(|x| x.max(T::zero())),
        vec![a.clone()],
        Box::new(|g, p, _| {
            vec![Some(g.zip_map(p[0].value(), |gv, x| {
                if x > T::zero() {
                    gv
                } else {
                    T::zero()
                }
            }))]
        }),
    )
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x * sigmoid(x)`.
pub fn silu<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        a.value().map(|x| x * sigmoid(x)),
        vec![a.clone()],
        Box::new(|g, p, _| {
            vec![Some(g.zip_map(p[0].value(), |gv, x| {
                let s = sigmoid(x);
                gv * s * (T::one() + x * (T::one() - s))
            }))]
        }),
    )
}

/// Parametric ReLU with a single learnable negative slope (`slope` has shape `[1]`).
pub fn prelu<T: Real>(a: &Var<T>, slope: &Var<T>) -> Result<Var<T>> {
    if slope.value().len() != 1 {
        return Err(Error::shape(format!(
            "prelu expects a single slope, got {:?}",
            slope.shape()
        )));
    }
    let s = slope.value().item();
    Ok(Var::from_op(
        a.value().map(|x| if x > T::zero() { x } else { s * x }),
        vec![a.clone(), slope.clone()],
        Box::new(|g, p, _| {
            let s = p[1].value().item();
            let x = p[0].value();
            let gx = p[0]
                .requires_grad()
                .then(|| g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { s * gv }));
            let gs = p[1].requires_grad().then(|| {
                let acc: T = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .filter(|(_, &xv)| xv <= T::zero())
                    .map(|(&gv, &xv)| gv * xv)
                    .sum();
                Tensor::from_vec(p[1].shape(), vec![acc]).expect("slope shape")
            });
            vec![gx, gs]
        }),
    ))
}

pub fn reshape<T: Real>(a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let out = a.value().clone().reshape(shape)?;
    let orig = a.shape().to_vec();
    Ok(Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(g.clone().reshape(&orig).expect("reshape back"))]),
    ))
}

pub fn permute<T: Real>(a: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
    let out = a.value().permute(axes)?;
    let inv = inverse_permutation(axes);
    Ok(Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(g.permute(&inv).expect("inverse permutation"))]),
    ))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

/// Concatenation along `axis`.
pub fn concat<T: Real>(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let nd = first.shape().len();
    if axis >= nd {
        return Err(Error::shape(format!("concat axis {axis} out of range")));
    }
    for p in parts {
        let ok = p.shape().len() == nd
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(format!(
                "concat along {axis}: {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let (outer, inner) = split_axis(first.shape(), axis);
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &d) in parts.iter().zip(&sizes) {
            let block = d * inner;
            data.extend_from_slice(&p.value().data()[o * block..(o + 1) * block]);
        }
    }
    let out = Tensor::from_vec(&shape, data)?;
    Ok(Var::from_op(
        out,
        parts.to_vec(),
        Box::new(move |g, parents, _| {
            let gd = g.data();
            parents
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if !p.requires_grad() {
                        return None;
                    }
                    let before: usize = sizes[..i].iter().sum();
                    let d = sizes[i];
                    let mut v = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let start = (o * total + before) * inner;
                        v.extend_from_slice(&gd[start..start + d * inner]);
                    }
                    Some(Tensor::from_vec(p.shape(), v).expect("concat grad"))
                })
                .collect()
        }),
    ))
}

/// `a[.., start..start+len, ..]` along `axis`.
pub fn slice<T: Real>(a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
    let shape = a.shape().to_vec();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::shape(format!(
            "slice {start}..{} of axis {axis} in {shape:?}",
            start + len
        )));
    }
    let (outer, inner) = split_axis(&shape, axis);
    let d = shape[axis];
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let src = a.value().data();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * d + start) * inner;
        data.extend_from_slice(&src[s..s + len * inner]);
    }
    let out = Tensor::from_vec(&out_shape, data)?;
    Ok(Var::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g, _, _| {
            let mut full = Tensor::zeros(&shape);
            let fd = full.data_mut();
            for o in 0..outer {
                let s = (o * d + start) * inner;
                fd[s..s + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(full)]
        }),
    ))
}

/// Tiles `a` along a new leading axis of size `n`.
pub fn repeat_leading<T: Real>(a: &Var<T>, n: usize) -> Var<T> {
    let mut shape = vec![n];
    shape.extend_from_slice(a.shape());
    let block = a.value().len();
    let mut data = Vec::with_capacity(n * block);
    for _ in 0..n {
        data.extend_from_slice(a.value().data());
    }
    let orig = a.shape().to_vec();
    Var::from_op(
        Tensor::from_vec(&shape, data).expect("repeat shape"),
        vec![a.clone()],
        Box::new(move |g, _, _| {
            let mut acc = vec![T::zero(); block];
            for chunk in g.data().chunks(block) {
                for (a, &b) in acc.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            vec![Some(Tensor::from_vec(&orig, acc).expect("repeat grad"))]
        }),
    )
}

/// Sum of all elements as a scalar.
pub fn sum_all<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        Tensor::scalar(a.value().sum()),
        vec![a.clone()],
        Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
    )
}

/// `Σ a ⊙ w` for a constant weight tensor `w`.
pub fn dot_const<T: Real>(a: &Var<T>, w: &Tensor<T>) -> Result<Var<T>> {
    same_shape("dot_const", a, w)?;
    let v: T = a
        .value()
        .data()
        .iter()
        .zip(w.data())
        .map(|(&x, &y)| x * y)
        .sum();
    let w = w.clone();
    Ok(Var::from_op(
        Tensor::scalar(v),
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(w.scale(g.item()))]),
    ))
}

/// Sum of scalars.
pub fn add_scalars<T: Real>(terms: &[Var<T>]) -> Result<Var<T>> {
    if terms.iter().any(|t| t.value().len() != 1) {
        return Err(Error::shape("add_scalars expects one-element tensors"));
    }
    let v: T = terms.iter().map(|t| t.value().item()).sum();
    Ok(Var::from_op(
        Tensor::scalar(v),
        terms.to_vec(),
        Box::new(|g, p, _| {
            p.iter()
                .map(|t| Some(Tensor::full(t.shape(), g.item())))
                .collect()
        }),
    ))
}
