use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Real `M x H x F` feature tensor (frames x channels x bins).
///
/// Storage is channel-major (`[H][M][F]`), the layout every network layer
/// operates on; indexing goes through the logical `(m, h, f)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    frames: usize,
    channels: usize,
    bins: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(frames: usize, channels: usize, bins: usize) -> Self {
        FeatureTensor {
            frames,
            channels,
            bins,
            data: vec![0.0; frames * channels * bins],
        }
    }

    /// Wraps channel-major data laid out as `[H][M][F]`.
    pub fn from_channel_major(frames: usize, channels: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * channels * bins {
            return Err(Error::shape(format!(
                "feature {frames}x{channels}x{bins} with {} values",
                data.len()
            )));
        }
        Ok(FeatureTensor {
            frames,
            channels,
            bins,
            data,
        })
    }

    pub fn from_fn(frames: usize, channels: usize, bins: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(frames, channels, bins);
        for h in 0..channels {
            for m in 0..frames {
                for b in 0..bins {
                    t.data[(h * frames + m) * bins + b] = f(m, h, b);
                }
            }
        }
        t
    }

    /// `(M, H, F)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.channels, self.bins)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn get(&self, m: usize, h: usize, f: usize) -> f64 {
        self.data[(h * self.frames + m) * self.bins + f]
    }

    pub fn channel_major(&self) -> &[f64] {
        &self.data
    }

    /// `[H, M, F]` tensor in the network's working precision.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.channels, self.frames, self.bins],
            self.data.iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("consistent dims")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(Error::shape(format!(
                "expected an [H, M, F] tensor, got {:?}",
                t.shape()
            )));
        }
        Self::from_channel_major(t.dim(1), t.dim(0), t.dim(2), t.to_f64_vec())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
