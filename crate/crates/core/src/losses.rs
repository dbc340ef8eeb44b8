//! Training objective: normalized magnitude L1 plus negative SI-SDR, with
//! targets ordered like the visual streams.

use serde::{Deserialize, Serialize};

use crate::autodiff::ops;
use crate::autodiff::Var;
use crate::dsp::{ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use crate::autodiff::ops::{MAG_NORM_FLOOR, SI_SDR_CAP_DB};

/// Loss terms of one evaluation; `total = mag_weight·mag + sisdr_weight·sisdr`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mag: f64,
    pub sisdr: f64,
    /// Some target had an all-zero magnitude and its norm was floored.
    pub mag_floored: bool,
}

/// Relative weights of the two terms (1:1 by default).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mag: f64,
    pub sisdr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mag: 1.0, sisdr: 1.0 }
    }
}

fn plane_magnitudes<T: Real>(planes: &Tensor<T>) -> Result<Tensor<T>> {
    let s = planes.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::shape(format!("expected [2, M, F] planes, got {s:?}")));
    }
    let n = s[1] * s[2];
    let (re, im) = planes.data().split_at(n);
    Tensor::from_vec(&s[1..], re.iter().zip(im).map(|(a, b)| a.hypot(*b)).collect())
}

/// `Σ_c ‖|est_c| − |tgt_c|‖₁ / max(‖|tgt_c|‖₁, 1e-8)` on `[2, M, F]` planes.
/// The flag reports whether any denominator was floored.
pub fn loss_mag<T: Real>(est: &[Var<T>], tgt: &[Tensor<T>]) -> Result<(Var<T>, bool)> {
    if est.len() != tgt.len() || est.is_empty() {
        return Err(Error::shape(format!(
            "{} estimates for {} targets",
            est.len(),
            tgt.len()
        )));
    }
    let mut floored = false;
    let terms = est
        .iter()
        .zip(tgt)
        .map(|(e, t)| {
            let mag = plane_magnitudes(t)?;
            floored |= mag.sum().as_f64() < MAG_NORM_FLOOR;
            ops::magnitude_l1_ratio(e, &mag)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ops::add_scalars(&terms)?, floored))
}

/// `−Σ_c SI-SDR(est_c, tgt_c)` in dB, each term capped at ±100 dB.
pub fn loss_sisdr<T: Real>(est: &[Var<T>], tgt: &[Tensor<T>]) -> Result<Var<T>> {
    if est.len() != tgt.len() || est.is_empty() {
        return Err(Error::shape(format!(
            "{} estimates for {} targets",
            est.len(),
            tgt.len()
        )));
    }
    let terms = est
        .iter()
        .zip(tgt)
        .map(|(e, t)| ops::si_sdr_db(e, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ops::scale(&ops::add_scalars(&terms)?, -T::one()))
}

/// Full objective on estimated waveforms `[N]` against target waveforms.
/// The magnitude term compares the STFTs of the waveforms.
pub fn total_loss<T: Real>(
    est: &[Var<T>],
    tgt: &[Tensor<T>],
    stft: &StftConfig,
    weights: LossWeights,
) -> Result<(Var<T>, LossReport)> {
    let est_spec = est
        .iter()
        .map(|e| ops::stft(e, stft))
        .collect::<Result<Vec<_>>>()?;
    let tgt_spec = tgt
        .iter()
        .map(|t| ops::stft(&Var::constant(t.clone()), stft).map(|v| v.value().clone()))
        .collect::<Result<Vec<_>>>()?;
    let (mag, floored) = loss_mag(&est_spec, &tgt_spec)?;
    let sisdr = loss_sisdr(est, tgt)?;
    let total = ops::add(
        &ops::scale(&mag, T::lit(weights.mag)),
        &ops::scale(&sisdr, T::lit(weights.sisdr)),
    )?;
    let report = LossReport {
        total: total.value().item().as_f64(),
        mag: mag.value().item().as_f64(),
        sisdr: sisdr.value().item().as_f64(),
        mag_floored: floored,
    };
    Ok((total, report))
}

/// [`loss_mag`] on plain spectrograms.
pub fn loss_mag_spectrograms(est: &[ComplexSpectrogram], tgt: &[ComplexSpectrogram]) -> Result<(f64, bool)> {
    let planes = |s: &ComplexSpectrogram| {
        Tensor::<f64>::from_vec(&[2, s.frames(), s.bins()], s.to_planes())
    };
    let e = est
        .iter()
        .map(|s| planes(s).map(Var::constant))
        .collect::<Result<Vec<_>>>()?;
    let t = tgt.iter().map(planes).collect::<Result<Vec<_>>>()?;
    let (v, floored) = loss_mag(&e, &t)?;
    Ok((v.value().item(), floored))
}

/// [`loss_sisdr`] on plain waveforms.
pub fn loss_sisdr_waves(est: &[Waveform], tgt: &[Waveform]) -> Result<f64> {
    let as_t = |w: &Waveform| Tensor::<f64>::from_vec(&[w.len()], w.samples.clone());
    let e = est
        .iter()
        .map(|w| as_t(w).map(Var::constant))
        .collect::<Result<Vec<_>>>()?;
    let t = tgt.iter().map(as_t).collect::<Result<Vec<_>>>()?;
    Ok(loss_sisdr(&e, &t)?.value().item())
}
