//! Audio-visual fusion and random-chunk positional encoding.

use rand::Rng;

use crate::autodiff::ops;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::layers;
use crate::model::{Ctx, Mode};
use crate::tensor::{Real, Tensor};

/// `Linear([audio; visual])` over the channel axis: `[H, M, F]` audio and
/// `[C·H, M, F]` visual features give `[H, M, F]`.
pub fn fuse<T: Real>(ctx: &Ctx<T>, audio: &Var<T>, visual: &Var<T>) -> Result<Var<T>> {
    let (a, v) = (audio.shape(), visual.shape());
    if a.len() != 3 || v.len() != 3 || a[1..] != v[1..] {
        return Err(Error::shape(format!("fuse: audio {a:?} vs visual {v:?}")));
    }
    let w = ctx.param("fusion.weight")?;
    if w.shape()[1] != a[0] + v[0] {
        return Err(Error::shape(format!(
            "fuse: {} input channels but fusion weight is {:?}",
            a[0] + v[0],
            w.shape()
        )));
    }
    let x = ops::concat(&[audio.clone(), visual.clone()], 0)?;
    layers::linear(ctx, "fusion", &x)
}

/// Sinusoidal table with `max_len` rows of width `width = H·F`:
/// `PE(r, 2i) = sin(r / 10000^(2i/D))`, `PE(r, 2i+1) = cos(r / 10000^(2i/D))`.
///
/// Rows are 0-based (row `r` is the `(r+1)`-th position) and computed on
/// demand, so large tables cost no memory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionalTable {
    max_len: usize,
    width: usize,
}

impl PositionalTable {
    pub fn new(max_len: usize, width: usize) -> Result<Self> {
        if max_len == 0 || width == 0 {
            return Err(Error::Config(format!(
                "positional table {max_len}x{width} must be non-empty"
            )));
        }
        Ok(PositionalTable { max_len, width })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        let i2 = (col & !1) as f64;
        let angle = row as f64 / 10000f64.powf(i2 / self.width as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        (0..self.width).map(|c| self.value(row, c)).collect()
    }

    /// Rows `start .. start + len` (0-based) as a `[len, D]` tensor.
    pub fn rows<T: Real>(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if start + len > self.max_len {
            return Err(Error::Config(format!(
                "positional rows {start}..{} exceed the table length {}",
                start + len,
                self.max_len
            )));
        }
        let freqs: Vec<f64> = (0..self.width)
            .map(|c| 10000f64.powf(-((c & !1) as f64) / self.width as f64))
            .collect();
        let mut t = Tensor::zeros(&[len, self.width]);
        for (r, row) in t.data_mut().chunks_mut(self.width).enumerate() {
            let pos = (start + r) as f64;
            for (c, v) in row.iter_mut().enumerate() {
                let a = pos * freqs[c];
                *v = T::lit(if c % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
        Ok(t)
    }
}

/// A chunk of the positional table; `tau` is the 1-based first row.
#[derive(Clone, Debug)]
pub struct RcpeChunk<T> {
    pub tau: usize,
    pub rows: Tensor<T>,
}

/// Draws the chunk start: uniform on `[1, Lmax − L + 1]` in training mode,
/// always 1 otherwise (no randomness consumed).
pub fn rcpe_tau(max_len: usize, len: usize, mode: Mode, rng: &mut impl Rng) -> Result<usize> {
    if len == 0 || len > max_len {
        return Err(Error::Config(format!(
            "utterance of {len} frames does not fit the positional table of {max_len}"
        )));
    }
    Ok(match mode {
        Mode::Train => rng.gen_range(1..=max_len - len + 1),
        Mode::Eval => 1,
    })
}

/// Selects `len` consecutive rows of `table` per [`rcpe_tau`].
pub fn rcpe_select<T: Real>(
    table: &PositionalTable,
    len: usize,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<RcpeChunk<T>> {
    let tau = rcpe_tau(table.max_len(), len, mode, rng)?;
    Ok(RcpeChunk {
        tau,
        rows: table.rows(tau - 1, len)?,
    })
}

/// `x[h, m, f] + rows[m, h·F + f]` for `x: [H, M, F]` and `rows: [M, H·F]`.
pub fn add_pe<T: Real>(x: &Var<T>, rows: &Tensor<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 3 || rows.shape() != [s[1], s[0] * s[2]] {
        return Err(Error::shape(format!(
            "add_pe: features {s:?} vs positional rows {:?}",
            rows.shape()
        )));
    }
    let pe = rows
        .clone()
        .reshape(&[s[1], s[0], s[2]])?
        .permute(&[1, 0, 2])?;
    ops::add_const(x, &pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_rows_pair_sines_and_cosines() {
        let t = PositionalTable::new(100, 64).unwrap();
        for r in [0, 1, 17, 99] {
            let n: f64 = t.row(r).iter().map(|v| v * v).sum();
            assert!((n - 32.0).abs() < 1e-9);
        }
        let rows = t.rows::<f64>(5, 3).unwrap();
        assert!((rows.data()[64 + 7] - t.value(6, 7)).abs() < 1e-12);
        assert!(t.rows::<f64>(98, 3).is_err());
        assert!(PositionalTable::new(0, 4).is_err());
    }

    #[test]
    fn rcpe_examples() {
        let t = PositionalTable::new(16, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = rcpe_select::<f64>(&t, 10, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e.tau, 1);
        assert_eq!(e.rows, t.rows(0, 10).unwrap());
        // Eval mode draws nothing.
        let mut fresh = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rng.gen::<u64>(), fresh.gen::<u64>());
        for _ in 0..50 {
            assert_eq!(rcpe_tau(16, 16, Mode::Train, &mut rng).unwrap(), 1);
        }
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| rcpe_tau(16, 4, Mode::Train, &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert!(draw(3).iter().all(|t| (1..=13).contains(t)));
        assert!(rcpe_tau(16, 17, Mode::Eval, &mut rng).is_err());
        assert!(rcpe_tau(16, 0, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn add_pe_layout_and_inverse() {
        let (h, m, f) = (3, 4, 2);
        let t = PositionalTable::new(8, h * f).unwrap();
        let rows = t.rows::<f64>(2, m).unwrap();
        let zero = Var::constant(Tensor::zeros(&[h, m, f]));
        let y = add_pe(&zero, &rows).unwrap();
        for c in 0..h {
            for i in 0..m {
                for k in 0..f {
                    assert!((y.value().data()[(c * m + i) * f + k] - t.value(2 + i, c * f + k)).abs() < 1e-12);
                }
            }
        }
        assert!(y.value().data().iter().all(|v| v.abs() <= 1.0));
        let x = Var::constant(Tensor::from_fn(&[h, m, f], |i| i as f64 * 0.1));
        let back = add_pe(&add_pe(&x, &rows).unwrap(), &rows.scale(-1.0)).unwrap();
        assert!(back.value().zip_map(x.value(), |a, b| a - b).max_abs() < 1e-15);
        assert!(add_pe(&x, &t.rows::<f64>(0, 3).unwrap()).is_err());
    }

    #[test]
    fn fuse_is_linear_without_bias() {
        use crate::model::ParamStore;
        let mut store = ParamStore::<f64>::new();
        store
            .params
            .insert("fusion.weight", Tensor::from_vec(&[2, 4], vec![1., 2., 0., -1., 0.5, 0., 3., 1.]).unwrap())
            .unwrap();
        store.params.insert("fusion.bias", Tensor::zeros(&[2])).unwrap();
        let ctx = Ctx::eval(&store);
        let x = Tensor::from_fn(&[2, 3, 2], |i| i as f64 - 4.0);
        let v = Tensor::from_fn(&[2, 3, 2], |i| (i as f64).sin());
        let y = fuse(&ctx, &Var::constant(x.clone()), &Var::constant(v.clone())).unwrap();
        let y3 = fuse(&ctx, &Var::constant(x.scale(3.0)), &Var::constant(v.scale(3.0))).unwrap();
        assert!(y3.value().zip_map(&y.value().scale(3.0), |a, b| a - b).max_abs() < 1e-12);
        // Hand value: channel 0 at (m, f) = (0, 0) is 1·x0 + 2·x1 + 0·v0 − 1·v1.
        let want = x.data()[0] + 2.0 * x.data()[6] - v.data()[6];
        assert!((y.value().data()[0] - want).abs() < 1e-12);
        let short = Var::constant(Tensor::zeros(&[1, 3, 2]));
        assert!(fuse(&ctx, &short, &Var::constant(v)).is_err());
    }
}
