//! Visual front end: embedding files, the temporal convolution stack, and
//! projection/upsampling to the audio feature grid.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ops::{self, ConvAxis};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::layers;
use crate::model::{Ctx, ModelConfig};
use crate::tensor::{Real, Tensor};

const AVEB_MAGIC: &[u8; 4] = b"AVEB";
const AVEB_VERSION: u32 = 1;

/// Default video frame rate.
pub const DEFAULT_FPS: f64 = 25.0;

/// `Mv x Fv` per-frame face embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbeddingSequence {
    frames: usize,
    dim: usize,
    fps: f64,
    data: Vec<f32>,
}

impl VisualEmbeddingSequence {
    /// Row-major (by frame) data; every value must be finite.
    pub fn new(frames: usize, dim: usize, fps: f64, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Data(format!("empty embedding sequence {frames}x{dim}")));
        }
        if data.len() != frames * dim {
            return Err(Error::shape(format!(
                "embedding {frames}x{dim} with {} values",
                data.len()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::Data(format!("fps {fps} must be positive")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite embedding value at frame {}, dim {}",
                i / dim,
                i % dim
            )));
        }
        Ok(VisualEmbeddingSequence {
            frames,
            dim,
            fps,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, frame: usize, d: usize) -> f32 {
        self.data[frame * self.dim + d]
    }

    /// Channel-first `[Fv, Mv, 1]` tensor, the layout of the convolution stack.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (mv, fv) = (self.frames, self.dim);
        Tensor::from_fn(&[fv, mv, 1], |i| T::lit(self.data[(i % mv) * fv + i / mv] as f64))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(AVEB_MAGIC)?;
        w.write_all(&AVEB_VERSION.to_le_bytes())?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&((self.fps * 1000.0).round() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("reading embeddings: {e}")))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != AVEB_MAGIC {
            return Err(Error::Format("not an AVEB embedding file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != AVEB_VERSION {
            return Err(Error::Format(format!("unsupported AVEB version {version}")));
        }
        let (mv, fv, fps_milli) = (word(8) as usize, word(12) as usize, word(16));
        let expected = mv
            .checked_mul(fv)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("AVEB header overflows".into()))?;
        let payload = &bytes[20..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "AVEB payload has {} bytes, header declares {mv}x{fv}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(mv, fv, fps_milli as f64 / 1000.0, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads an AVEB embedding file.
pub fn load_embeddings(path: &Path) -> Result<VisualEmbeddingSequence> {
    VisualEmbeddingSequence::load(path)
}

/// Writes an AVEB embedding file.
pub fn save_embeddings(seq: &VisualEmbeddingSequence, path: &Path) -> Result<()> {
    seq.save(path)
}

/// Temporal convolution stack over `x: [Fv, Mv, 1]`. Each of the `R` blocks
/// computes `x + Conv_k3(BN(PReLU(Conv_k1(BN(ReLU(x))))))` along time.
pub fn vtcn_forward<T: Real>(ctx: &Ctx<T>, cfg: &ModelConfig, x: &Var<T>) -> Result<Var<T>> {
    if x.shape().len() != 3 || x.shape()[0] != cfg.visual_dim || x.shape()[2] != 1 {
        return Err(Error::shape(format!(
            "visual stack expects [{}, Mv, 1], got {:?}",
            cfg.visual_dim,
            x.shape()
        )));
    }
    let mut x = x.clone();
    for r in 0..cfg.vtcn_blocks {
        let p = format!("visual.vtcn.{r}");
        let h = ops::relu(&x);
        let h = layers::batch_norm(ctx, &format!("{p}.bn1"), &h, cfg.norm_eps)?;
        let h = layers::conv(ctx, &format!("{p}.conv1"), &h, 1, ConvAxis::Leading)?;
        let h = layers::prelu(ctx, &format!("{p}.prelu"), &h)?;
        let h = layers::batch_norm(ctx, &format!("{p}.bn2"), &h, cfg.norm_eps)?;
        let h = layers::conv(ctx, &format!("{p}.conv2"), &h, 1, ConvAxis::Leading)?;
        x = ops::add(&x, &h)?;
    }
    Ok(x)
}

/// `[Mv, M]` linear interpolation matrix with pinned endpoints: output frame
/// `m` samples the input at position `m (Mv − 1) / (M − 1)`.
pub fn upsample_matrix<T: Real>(mv: usize, m: usize) -> Tensor<T> {
    let mut u = Tensor::zeros(&[mv, m]);
    let d = u.data_mut();
    for j in 0..m {
        if mv == 1 {
            d[j] = T::one();
            continue;
        }
        let pos = if m == 1 {
            0.0
        } else {
            j as f64 * (mv - 1) as f64 / (m - 1) as f64
        };
        let lo = (pos.floor() as usize).min(mv - 1);
        let w = pos - lo as f64;
        d[lo * m + j] += T::lit(1.0 - w);
        if w > 0.0 {
            d[(lo + 1) * m + j] += T::lit(w);
        }
    }
    u
}

/// Per-frame `Fv → F` projection, broadcast across `hidden` channels, then
/// linear interpolation in time to `m` frames: `[Fv, Mv, 1] → [H, M, F]`.
pub fn project_and_upsample<T: Real>(
    ctx: &Ctx<T>,
    hidden: usize,
    x: &Var<T>,
    m: usize,
) -> Result<Var<T>> {
    if m == 0 {
        return Err(Error::shape("upsampling to zero frames"));
    }
    let (fv, mv) = (x.shape()[0], x.shape()[1]);
    let flat = ops::reshape(x, &[fv, mv])?;
    let proj = layers::linear(ctx, "visual.proj", &flat)?;
    let bins = proj.shape()[0];
    let up = ops::matmul_const(&proj, &upsample_matrix(mv, m))?;
    let frames_first = ops::permute(&up, &[1, 0])?;
    let tiled = ops::repeat_leading(&frames_first, hidden);
    debug_assert_eq!(tiled.shape(), [hidden, m, bins]);
    Ok(tiled)
}

/// Visual features of one stream on the audio grid, `[H, M, F]`.
pub fn encode_visual<T: Real>(
    ctx: &Ctx<T>,
    cfg: &ModelConfig,
    seq: &VisualEmbeddingSequence,
    m: usize,
) -> Result<Var<T>> {
    if seq.dim() != cfg.visual_dim {
        return Err(Error::shape(format!(
            "embedding width {} but the model expects {}",
            seq.dim(),
            cfg.visual_dim
        )));
    }
    let x = Var::constant(seq.to_tensor());
    let h = vtcn_forward(ctx, cfg, &x)?;
    project_and_upsample(ctx, cfg.hidden, &h, m)
}

/// Channel-axis concatenation of per-speaker `[H, M, F]` features, in the
/// given speaker order.
pub fn stack_speakers<T: Real>(streams: &[Var<T>]) -> Result<Var<T>> {
    let first = streams
        .first()
        .ok_or_else(|| Error::shape("no visual streams"))?;
    if streams.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::shape("visual streams differ in shape"));
    }
    ops::concat(streams, 0)
}
