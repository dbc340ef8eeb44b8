use crate::error::Result;
use crate::model::TensorMap;
use crate::tensor::{Real, Tensor};

/// Adam with bias correction and the usual defaults (0.9, 0.999, 1e-8).
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: TensorMap<T>,
    pub v: TensorMap<T>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: TensorMap::new(),
            v: TensorMap::new(),
        }
    }
}

impl<T: Real> Adam<T> {
    /// One update of every parameter that has a gradient. Moments of a
    /// parameter are created the first time it receives one.
    pub fn step(&mut self, params: &mut TensorMap<T>, grads: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step = T::lit(lr / c1);
        let rc2 = T::lit(1.0 / c2.sqrt());
        let eps = T::lit(self.eps);
        for (name, g) in grads {
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()))?;
                self.v.insert(name.clone(), Tensor::zeros(g.shape()))?;
            }
            let m = self.m.get_mut(name).expect("inserted").data_mut();
            let v = self.v.get_mut(name).expect("inserted").data_mut();
            let p = params
                .get_mut(name)
                .ok_or_else(|| crate::Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(crate::Error::Shape(format!("gradient shape of {name}")));
            }
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi -= step * *mi / ((*vi).sqrt() * rc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr · g / (|g| + eps').
        let mut params = TensorMap::new();
        params.insert("w", Tensor::<f64>::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap();
        let mut opt = Adam::default();
        opt.step(&mut params, &[("w".into(), g)], 0.1).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = TensorMap::new();
        params.insert("w", Tensor::<f64>::from_vec(&[3], vec![3.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let w = params.get("w").unwrap().clone();
            opt.step(&mut params, &[("w".into(), w.scale(2.0))], 0.01).unwrap();
        }
        assert!(params.get("w").unwrap().max_abs() < 1e-3);
    }
}
