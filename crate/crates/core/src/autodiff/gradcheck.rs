//! Central finite-difference gradient checking for double-precision graphs.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Agreement between analytic and numeric gradients for one input tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, GRAD_FLOOR·G)`
    /// over the probed coordinates, `G` being the largest analytic gradient
    /// norm among all inputs of the check.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub probed: usize,
}

/// Fraction of the largest gradient norm below which errors count
/// absolutely. Some parameters have a gradient that vanishes identically (a
/// key bias under softmax, a bias in front of batch normalization); their
/// numeric estimate is pure roundoff.
pub const GRAD_FLOOR: f64 = 1e-4;

fn probe_indices(len: usize, max_coords: usize) -> Vec<usize> {
    if len <= max_coords {
        return (0..len).collect();
    }
    // Evenly spread, always including both ends.
    (0..max_coords)
        .map(|i| i * (len - 1) / (max_coords - 1).max(1))
        .collect()
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences with step `eps`, probing at most `max_coords` entries per input.
pub fn check<F>(inputs: &[(&str, Tensor<f64>)], eps: f64, max_coords: usize, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let leaves: Vec<Var<f64>> = inputs.iter().map(|(_, t)| Var::leaf(t.clone())).collect();
    let out = f(&leaves)?;
    if out.value().len() != 1 {
        return Err(Error::shape(format!("gradcheck needs a scalar, got {:?}", out.shape())));
    }
    let grads = out.backward();
    let floor = GRAD_FLOOR
        * leaves
            .iter()
            .map(|l| grads.get(l).map_or(0.0, |g| g.sq_norm().sqrt()))
            .fold(0.0, f64::max);
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let vars: Vec<Var<f64>> = vals.iter().cloned().map(Var::constant).collect();
        Ok(f(&vars)?.value().item())
    };
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&leaves[k]);
        let idx = probe_indices(t.len(), max_coords);
        let (mut diff, mut na, mut nn, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for &i in &idx {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + eps;
            let up = eval(&values)?;
            values[k].data_mut()[i] = orig - eps;
            let down = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let scale = na.sqrt().max(nn.sqrt()).max(floor);
        report.push(GradCheck {
            name: name.to_string(),
            rel_err: diff.sqrt() / scale,
            max_abs_err: max_abs,
            probed: idx.len(),
        });
    }
    Ok(report)
}

/// Largest relative error of a report (0 for an empty one).
pub fn worst(report: &[GradCheck]) -> f64 {
    report.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}
