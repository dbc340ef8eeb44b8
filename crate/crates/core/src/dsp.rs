//! Time-frequency front end: variance normalization, STFT/iSTFT and
//! real/imaginary stacking.
//!
//! Framing convention: frames are centred on multiples of the hop with
//! reflect padding at both ends, so a signal of `n` samples has
//! `n / hop + 1` frames. Synthesis is weighted overlap-add normalized by the
//! summed squared window, which reconstructs the input exactly wherever the
//! window sum is non-zero (everywhere, for a periodic Hann at 50% overlap).

use num_traits::Zero;
pub use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;
use crate::tensor::Real;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Floor applied to the normalization scale of (near-)silent input.
pub const MIN_SCALE: f64 = 1e-8;

/// Mono audio signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("waveform must contain at least one sample".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    /// Waveform at the default 16 kHz rate.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, DEFAULT_SAMPLE_RATE)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power `Σx²/n`.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len().max(1) as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        (self.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// Scale removed from a mixture before separation and restored afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub scale: f64,
    /// Set when the input was (near-)silent and the scale was clamped.
    pub degenerate: bool,
}

/// Divides by the standard deviation of the input.
pub fn normalize_variance(wave: &Waveform) -> (Waveform, NormalizationState) {
    let std = wave.std();
    let degenerate = !(std >= MIN_SCALE);
    let scale = if degenerate { MIN_SCALE } else { std };
    let samples = wave.samples.iter().map(|v| v / scale).collect();
    (
        Waveform {
            samples,
            sample_rate: wave.sample_rate,
        },
        NormalizationState { scale, degenerate },
    )
}

pub fn denormalize(wave: &Waveform, state: &NormalizationState) -> Waveform {
    Waveform {
        samples: wave.samples.iter().map(|v| v * state.scale).collect(),
        sample_rate: wave.sample_rate,
    }
}

/// STFT framing parameters; the window is always a periodic Hann.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            win_length: 512,
            hop: 256,
        }
    }
}

impl StftConfig {
    /// Half-overlap configuration for a power-of-two window length.
    pub fn new(win_length: usize) -> Result<Self> {
        let cfg = StftConfig {
            win_length,
            hop: win_length / 2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_length < 2 || !self.win_length.is_power_of_two() {
            return Err(Error::Config(format!(
                "window length {} must be a power of two >= 2",
                self.win_length
            )));
        }
        if self.hop * 2 != self.win_length {
            return Err(Error::Config(format!(
                "hop {} must be half the window length {}",
                self.hop, self.win_length
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.win_length / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    pub fn window<T: Real>(&self) -> Vec<T> {
        let n = self.win_length as f64;
        (0..self.win_length)
            .map(|i| T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
            .collect()
    }
}

/// Index into a signal of length `len` with symmetric (edge-excluded) reflection.
fn reflect(idx: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = idx.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Forward STFT of `x`, returned as `[2, M, F]` (real plane, then imaginary).
pub(crate) fn stft_planes<T: Real>(x: &[T], cfg: &StftConfig) -> Vec<T> {
    let n = cfg.win_length;
    let bins = cfg.num_bins();
    let frames = cfg.num_frames(x.len());
    let win = cfg.window::<T>();
    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::<T>::zero(); n];
    let mut out = vec![T::zero(); 2 * frames * bins];
    let half = (n / 2) as isize;
    for m in 0..frames {
        let start = (m * cfg.hop) as isize - half;
        for (j, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x[reflect(start + j as isize, x.len())] * win[j], T::zero());
        }
        fft.process(&mut buf);
        for f in 0..bins {
            out[m * bins + f] = buf[f].re;
            out[(frames + m) * bins + f] = buf[f].im;
        }
    }
    out
}

/// Adjoint of [`stft_planes`]: maps a `[2, M, F]` gradient to the signal.
pub(crate) fn stft_planes_adjoint<T: Real>(g: &[T], len: usize, cfg: &StftConfig) -> Vec<T> {
    let n = cfg.win_length;
    let bins = cfg.num_bins();
    let frames = cfg.num_frames(len);
    let win = cfg.window::<T>();
    let ifft = FftPlanner::<T>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex::<T>::zero(); n];
    let mut gx = vec![T::zero(); len];
    let half = (n / 2) as isize;
    for m in 0..frames {
        buf.iter_mut().for_each(|b| *b = Complex::zero());
        for f in 0..bins {
            buf[f] = Complex::new(g[m * bins + f], g[(frames + m) * bins + f]);
        }
        ifft.process(&mut buf);
        let start = (m * cfg.hop) as isize - half;
        for (j, b) in buf.iter().enumerate() {
            gx[reflect(start + j as isize, len)] += win[j] * b.re;
        }
    }
    gx
}

fn window_square_sum<T: Real>(frames: usize, cfg: &StftConfig) -> Vec<T> {
    let win = cfg.window::<T>();
    let mut wsum = vec![T::zero(); (frames - 1) * cfg.hop + cfg.win_length];
    for m in 0..frames {
        for (j, &w) in win.iter().enumerate() {
            wsum[m * cfg.hop + j] += w * w;
        }
    }
    wsum
}

fn check_istft_len(frames: usize, out_len: usize, cfg: &StftConfig) -> Result<()> {
    if frames == 0 {
        return Err(Error::shape("istft of a spectrogram with no frames"));
    }
    if out_len > frames * cfg.hop + cfg.win_length {
        return Err(Error::shape(format!(
            "istft output length {out_len} exceeds {frames} frames x hop {} + window {}",
            cfg.hop, cfg.win_length
        )));
    }
    Ok(())
}

/// Inverse STFT of `[2, M, F]` planes by normalized weighted overlap-add.
pub(crate) fn istft_planes<T: Real>(
    spec: &[T],
    frames: usize,
    cfg: &StftConfig,
    out_len: usize,
) -> Result<Vec<T>> {
    check_istft_len(frames, out_len, cfg)?;
    let n = cfg.win_length;
    let bins = cfg.num_bins();
    if spec.len() != 2 * frames * bins {
        return Err(Error::shape(format!(
            "istft: {} values for {frames} frames of {bins} bins",
            spec.len()
        )));
    }
    let win = cfg.window::<T>();
    let ifft = FftPlanner::<T>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex::<T>::zero(); n];
    let mut acc = vec![T::zero(); (frames - 1) * cfg.hop + n];
    let inv_n = T::one() / T::from(n).expect("n");
    for m in 0..frames {
        for f in 0..bins {
            let re = spec[m * bins + f];
            let im = if f == 0 || f == bins - 1 {
                T::zero()
            } else {
                spec[(frames + m) * bins + f]
            };
            buf[f] = Complex::new(re, im);
            if f != 0 && f != bins - 1 {
                buf[n - f] = Complex::new(re, -im);
            }
        }
        ifft.process(&mut buf);
        for (j, b) in buf.iter().enumerate() {
            acc[m * cfg.hop + j] += win[j] * b.re * inv_n;
        }
    }
    let wsum = window_square_sum::<T>(frames, cfg);
    let tiny = T::lit(1e-11);
    let half = n / 2;
    Ok((0..out_len)
        .map(|t| {
            let i = t + half;
            if i < acc.len() && wsum[i] > tiny {
                acc[i] / wsum[i]
            } else {
                T::zero()
            }
        })
        .collect())
}

/// Adjoint of [`istft_planes`]: maps a waveform gradient to `[2, M, F]`.
pub(crate) fn istft_planes_adjoint<T: Real>(g: &[T], frames: usize, cfg: &StftConfig) -> Vec<T> {
    let n = cfg.win_length;
    let bins = cfg.num_bins();
    let win = cfg.window::<T>();
    let wsum = window_square_sum::<T>(frames, cfg);
    let half = n / 2;
    let mut gacc = vec![T::zero(); wsum.len()];
    let tiny = T::lit(1e-11);
    for (t, &gv) in g.iter().enumerate() {
        let i = t + half;
        if i < gacc.len() && wsum[i] > tiny {
            gacc[i] = gv / wsum[i];
        }
    }
    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::<T>::zero(); n];
    let mut out = vec![T::zero(); 2 * frames * bins];
    let inv_n = T::one() / T::from(n).expect("n");
    let two = T::lit(2.0);
    for m in 0..frames {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(win[j] * gacc[m * cfg.hop + j], T::zero());
        }
        fft.process(&mut buf);
        for f in 0..bins {
            let edge = f == 0 || f == bins - 1;
            let c = if edge { inv_n } else { two * inv_n };
            out[m * bins + f] = c * buf[f].re;
            out[(frames + m) * bins + f] = if edge { T::zero() } else { c * buf[f].im };
        }
    }
    out
}

/// `M x F` complex spectrogram, frames major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex<f64>>,
}

impl ComplexSpectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<Complex<f64>>) -> Result<Self> {
        if frames == 0 || data.len() != frames * bins {
            return Err(Error::shape(format!(
                "spectrogram {frames}x{bins} with {} values",
                data.len()
            )));
        }
        Ok(ComplexSpectrogram { frames, bins, data })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        ComplexSpectrogram {
            frames,
            bins,
            data: vec![Complex::zero(); frames * bins],
        }
    }

    /// Builds from `[2, M, F]` real/imaginary planes.
    pub fn from_planes(planes: &[f64], frames: usize, bins: usize) -> Result<Self> {
        if planes.len() != 2 * frames * bins {
            return Err(Error::shape("planes length does not match 2 x M x F"));
        }
        let data = (0..frames * bins)
            .map(|i| Complex::new(planes[i], planes[frames * bins + i]))
            .collect();
        Self::new(frames, bins, data)
    }

    /// `[2, M, F]` real/imaginary planes.
    pub fn to_planes(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|c| c.re)
            .chain(self.data.iter().map(|c| c.im))
            .collect()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn get(&self, m: usize, f: usize) -> Complex<f64> {
        self.data[m * self.bins + f]
    }

    pub fn set(&mut self, m: usize, f: usize, v: Complex<f64>) {
        self.data[m * self.bins + f] = v;
    }

    pub fn data(&self) -> &[Complex<f64>] {
        &self.data
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

pub fn stft(wave: &Waveform, cfg: &StftConfig) -> ComplexSpectrogram {
    let planes = stft_planes(&wave.samples, cfg);
    ComplexSpectrogram::from_planes(&planes, cfg.num_frames(wave.len()), cfg.num_bins())
        .expect("stft produces consistent planes")
}

pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, out_len: usize) -> Result<Waveform> {
    if spec.bins() != cfg.num_bins() {
        return Err(Error::shape(format!(
            "spectrogram has {} bins, config expects {}",
            spec.bins(),
            cfg.num_bins()
        )));
    }
    let samples = istft_planes(&spec.to_planes(), spec.frames(), cfg, out_len)?;
    Ok(Waveform {
        samples,
        sample_rate: DEFAULT_SAMPLE_RATE,
    })
}

/// Stacks real and imaginary parts as channels 0 and 1 of an `M x 2 x F` feature.
pub fn stack_ri(spec: &ComplexSpectrogram) -> FeatureTensor {
    FeatureTensor::from_channel_major(spec.frames(), 2, spec.bins(), spec.to_planes())
        .expect("two planes")
}

/// Inverse of [`stack_ri`].
pub fn unstack_ri(feat: &FeatureTensor) -> Result<ComplexSpectrogram> {
    if feat.channels() != 2 {
        return Err(Error::shape(format!(
            "expected 2 channels (real, imaginary), got {}",
            feat.channels()
        )));
    }
    ComplexSpectrogram::from_planes(feat.channel_major(), feat.frames(), feat.bins())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct DFT of one centred, reflect-padded, windowed frame.
    fn naive_frame(x: &[f64], m: usize, cfg: &StftConfig) -> Vec<Complex<f64>> {
        let n = cfg.win_length;
        let win = cfg.window::<f64>();
        let frame: Vec<f64> = (0..n)
            .map(|j| {
                let idx = (m * cfg.hop + j) as isize - (n / 2) as isize;
                x[reflect(idx, x.len())] * win[j]
            })
            .collect();
        (0..cfg.num_bins())
            .map(|f| {
                frame
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let th = -2.0 * std::f64::consts::PI * (f * j) as f64 / n as f64;
                        Complex::new(v * th.cos(), v * th.sin())
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn normalize_examples() {
        let (w, s) = normalize_variance(&Waveform::from_samples(vec![1.0, -1.0, 1.0, -1.0]).unwrap());
        assert!((s.scale - 1.0).abs() < 1e-12 && !s.degenerate);
        assert_eq!(w.samples, vec![1.0, -1.0, 1.0, -1.0]);

        let (w, s) = normalize_variance(&Waveform::from_samples(vec![2.0, -2.0, 2.0, -2.0]).unwrap());
        assert!((s.scale - 2.0).abs() < 1e-12);
        assert_eq!(w.samples, vec![1.0, -1.0, 1.0, -1.0]);

        let (w, s) = normalize_variance(&Waveform::from_samples(vec![0.0; 16]).unwrap());
        assert_eq!(s.scale, MIN_SCALE);
        assert!(s.degenerate);
        assert!(w.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denormalize_examples() {
        let st = NormalizationState {
            scale: 2.0,
            degenerate: false,
        };
        let w = Waveform::from_samples(vec![1.0, -1.0]).unwrap();
        assert_eq!(denormalize(&w, &st).samples, vec![2.0, -2.0]);
        let st5 = NormalizationState {
            scale: 5.0,
            degenerate: false,
        };
        let z = Waveform::from_samples(vec![0.0, 0.0]).unwrap();
        assert_eq!(denormalize(&z, &st5).samples, vec![0.0, 0.0]);
    }

    #[test]
    fn waveform_rejects_non_finite_and_empty() {
        assert!(Waveform::from_samples(vec![]).is_err());
        assert!(Waveform::from_samples(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn three_second_frame_count() {
        let cfg = StftConfig::default();
        let w = Waveform::from_samples(vec![0.1; 48_000]).unwrap();
        let s = stft(&w, &cfg);
        assert_eq!((s.frames(), s.bins()), (188, 257));
    }

    #[test]
    fn stft_matches_direct_dft() {
        let cfg = StftConfig::new(32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = stft(&Waveform::from_samples(x.clone()).unwrap(), &cfg);
        for m in 0..s.frames() {
            for (f, want) in naive_frame(&x, m, &cfg).into_iter().enumerate() {
                assert!((s.get(m, f) - want).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = StftConfig::default();
        let s = stft(&Waveform::from_samples(vec![0.0; 1000]).unwrap(), &cfg);
        assert_eq!(s.energy(), 0.0);
        let w = istft(&ComplexSpectrogram::zeros(5, 257), &cfg, 1000).unwrap();
        assert!(w.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_noise_roundtrip() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..16_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Waveform::from_samples(x.clone()).unwrap();
        let y = istft(&stft(&w, &cfg), &cfg, x.len()).unwrap();
        let err = x
            .iter()
            .zip(&y.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "max error {err}");
    }

    #[test]
    fn tone_roundtrip_relative_error() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..16_000)
            .map(|t| (2.0 * std::f64::consts::PI * 440.0 * t as f64 / 16_000.0).sin())
            .collect();
        let y = istft(&stft(&Waveform::from_samples(x.clone()).unwrap(), &cfg), &cfg, x.len()).unwrap();
        let num: f64 = x.iter().zip(&y.samples).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = x.iter().map(|a| a * a).sum();
        assert!((num / den).sqrt() <= 1e-6);
    }

    #[test]
    fn short_signals_roundtrip() {
        let cfg = StftConfig::new(64).unwrap();
        for len in [1usize, 2, 5, 31, 32, 33, 100] {
            let x: Vec<f64> = (0..len).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
            let y = istft(&stft(&Waveform::from_samples(x.clone()).unwrap(), &cfg), &cfg, len).unwrap();
            for (a, b) in x.iter().zip(&y.samples) {
                assert!((a - b).abs() < 1e-9, "len {len}");
            }
        }
    }

    #[test]
    fn istft_rejects_excess_length() {
        let cfg = StftConfig::new(64).unwrap();
        let spec = ComplexSpectrogram::zeros(3, 33);
        assert!(istft(&spec, &cfg, 3 * 32 + 64).is_ok());
        assert!(istft(&spec, &cfg, 3 * 32 + 65).is_err());
        assert!(istft(&ComplexSpectrogram::zeros(3, 17), &cfg, 10).is_err());
    }

    #[test]
    fn stack_ri_layout() {
        let mut s = ComplexSpectrogram::zeros(2, 3);
        s.set(1, 2, Complex::new(3.0, 4.0));
        let f = stack_ri(&s);
        assert_eq!((f.frames(), f.channels(), f.bins()), (2, 2, 3));
        assert_eq!(f.get(1, 0, 2), 3.0);
        assert_eq!(f.get(1, 1, 2), 4.0);
        assert_eq!(unstack_ri(&f).unwrap(), s);

        let real = ComplexSpectrogram::new(1, 2, vec![Complex::new(1.0, 0.0), Complex::new(-2.0, 0.0)]).unwrap();
        let f = stack_ri(&real);
        assert!((0..2).all(|b| f.get(0, 1, b) == 0.0));
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let cfg = StftConfig::new(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let len = 45;
        let frames = cfg.num_frames(len);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..2 * frames * cfg.num_bins()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();

        let lhs = dot(&stft_planes(&x, &cfg), &y);
        let rhs = dot(&x, &stft_planes_adjoint(&y, len, &cfg));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));

        let lhs = dot(&istft_planes(&y, frames, &cfg, len).unwrap(), &x);
        let rhs = dot(&y, &istft_planes_adjoint(&x, frames, &cfg));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
