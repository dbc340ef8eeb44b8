//! The separator network: audio encoder, fusion, stacked blocks, decoder.

mod blocks;
mod config;
pub mod layers;
mod params;
pub mod registry;

pub use blocks::{block_forward, crossband_forward, gmhsa_forward, narrowband_forward};
pub use config::{EncoderAxis, ModelConfig};
pub use params::{Ctx, Mode, ParamStore, TensorMap};
pub use registry::{count_parameters, init_params};

use crate::autodiff::ops::{self, ConvAxis};
use crate::autodiff::Var;
use crate::dsp::{denormalize, normalize_variance, Waveform};
use crate::error::{Error, Result};
use crate::fusion::{add_pe, fuse, rcpe_select, PositionalTable};
use crate::tensor::{Real, Tensor};
use crate::visual::{encode_visual, stack_speakers, VisualEmbeddingSequence};

/// `[2, M, F]` stacked real/imaginary mixture to `[H, M, F]`.
pub fn audio_encode<T: Real>(ctx: &Ctx<T>, cfg: &ModelConfig, y: &Var<T>) -> Result<Var<T>> {
    let s = y.shape();
    if s.len() != 3 || s[0] != 2 || s[2] != cfg.bins() {
        return Err(Error::shape(format!(
            "audio encoder expects [2, M, {}], got {s:?}",
            cfg.bins()
        )));
    }
    let axis = match cfg.encoder_axis {
        EncoderAxis::Frequency => ConvAxis::Trailing,
        EncoderAxis::Time => ConvAxis::Leading,
    };
    layers::conv(ctx, "audio_encoder", y, 1, axis)
}

/// `[H, M, F]` to `[2C, M, F]`; channels `2c` and `2c + 1` are the real and
/// imaginary parts of speaker `c`.
pub fn decode<T: Real>(ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
    layers::linear(ctx, "decoder", x)
}

/// Result of the spectral part of a forward pass.
pub struct Separation<T: Real> {
    /// `[2C, M, F]` estimated spectra.
    pub spectra: Var<T>,
    /// 1-based first row of the positional chunk that was added.
    pub tau: usize,
}

/// Mixture spectrum `[2, M, F]` and one embedding stream per speaker to
/// per-speaker spectra. Output `c` follows `visuals[c]`.
pub fn separate_spectra<T: Real>(
    ctx: &Ctx<T>,
    cfg: &ModelConfig,
    mixture: &Var<T>,
    visuals: &[VisualEmbeddingSequence],
) -> Result<Separation<T>> {
    if visuals.len() != cfg.speakers {
        return Err(Error::Config(format!(
            "{} visual streams for a {}-speaker model",
            visuals.len(),
            cfg.speakers
        )));
    }
    let audio = audio_encode(ctx, cfg, mixture)?;
    let (m, f) = (audio.shape()[1], audio.shape()[2]);
    let streams = visuals
        .iter()
        .map(|v| encode_visual(ctx, cfg, v, m))
        .collect::<Result<Vec<_>>>()?;
    let visual = stack_speakers(&streams)?;
    drop(streams);
    let x = fuse(ctx, &audio, &visual)?;
    let table = PositionalTable::new(cfg.pe_max_len, cfg.hidden * f)?;
    let chunk = ctx.with_rng(|rng| rcpe_select::<T>(&table, m, ctx.mode(), rng))?;
    let mut x = add_pe(&x, &chunk.rows)?;
    for b in 0..cfg.blocks {
        x = block_forward(ctx, cfg, b, &x)?;
    }
    Ok(Separation {
        spectra: decode(ctx, &x)?,
        tau: chunk.tau,
    })
}

/// Spectra `[2C, M, F]` to `C` waveforms of `len` samples.
pub fn spectra_to_waves<T: Real>(cfg: &ModelConfig, spectra: &Var<T>, len: usize) -> Result<Vec<Var<T>>> {
    let stft = cfg.stft();
    (0..spectra.shape()[0] / 2)
        .map(|c| ops::istft(&ops::slice(spectra, 0, 2 * c, 2)?, &stft, len))
        .collect()
}

/// Parameters and configuration of one separator instance.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Wraps existing tensors after checking them against the registry.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for (specs, map, kind) in [
            (registry::param_specs(&config), &params.params, "parameter"),
            (registry::buffer_specs(&config), &params.buffers, "buffer"),
        ] {
            if specs.len() != map.len() {
                return Err(Error::Format(format!(
                    "expected {} {kind} tensors, found {}",
                    specs.len(),
                    map.len()
                )));
            }
            for spec in specs {
                let t = map
                    .get(&spec.name)
                    .ok_or_else(|| Error::Format(format!("missing {kind} {}", spec.name)))?;
                if t.shape() != spec.shape.as_slice() {
                    return Err(Error::Format(format!(
                        "{kind} {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )));
                }
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.params.numel()
    }

    /// Spectral forward pass in inference mode on a normalized mixture.
    pub fn infer_spectra(&self, mixture: &Waveform, visuals: &[VisualEmbeddingSequence]) -> Result<Tensor<T>> {
        let ctx = Ctx::eval(&self.params);
        let spec = mixture_planes::<T>(&self.config, &mixture.samples);
        Ok(separate_spectra(&ctx, &self.config, &Var::constant(spec), visuals)?
            .spectra
            .value()
            .clone())
    }

    /// Full waveform-to-waveform separation; output `c` follows `visuals[c]`.
    pub fn separate(&self, mixture: &Waveform, visuals: &[VisualEmbeddingSequence]) -> Result<Vec<Waveform>> {
        let (norm, state) = normalize_variance(mixture);
        let ctx = Ctx::eval(&self.params);
        let spec = Var::constant(mixture_planes::<T>(&self.config, &norm.samples));
        let out = separate_spectra(&ctx, &self.config, &spec, visuals)?;
        spectra_to_waves(&self.config, &out.spectra, mixture.len())?
            .into_iter()
            .map(|w| {
                let samples = w.value().to_f64_vec();
                if samples.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("non-finite separated samples".into()));
                }
                let est = Waveform::new(samples, mixture.sample_rate)?;
                Ok(denormalize(&est, &state))
            })
            .collect()
    }
}

/// STFT planes `[2, M, F]` of already-normalized samples.
pub fn mixture_planes<T: Real>(cfg: &ModelConfig, samples: &[f64]) -> Tensor<T> {
    let stft = cfg.stft();
    let x: Vec<T> = samples.iter().map(|&v| T::lit(v)).collect();
    let frames = stft.num_frames(samples.len());
    Tensor::from_vec(
        &[2, frames, stft.num_bins()],
        crate::dsp::stft_planes(&x, &stft),
    )
    .expect("stft plane shape")
}
