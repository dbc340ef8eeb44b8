use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::tensor::Precision;

/// Axis along which the audio encoder convolution slides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderAxis {
    #[default]
    Frequency,
    Time,
}

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of separator blocks `B`.
    pub blocks: usize,
    /// Hidden channels `H`.
    pub hidden: usize,
    /// Full-band bottleneck channels `H′`.
    pub bottleneck: usize,
    /// Narrow-band feed-forward width `H″`.
    pub ffn: usize,
    /// Audio encoder kernel `k_a`.
    pub encoder_kernel: usize,
    pub encoder_axis: EncoderAxis,
    pub t_kernel: usize,
    pub f_kernel: usize,
    /// Groups of the grouped convolutions and of group normalization.
    pub groups: usize,
    /// Attention heads, used by both the narrow-band and global attention.
    pub heads: usize,
    /// Global attention embedding `E`; `None` means `ceil(512 / F)`.
    pub embed_dim: Option<usize>,
    /// Number of speakers `C`.
    pub speakers: usize,
    /// Visual temporal convolution blocks `R`.
    pub vtcn_blocks: usize,
    /// Visual embedding width `Fv`.
    pub visual_dim: usize,
    pub dropout: f64,
    pub win_length: usize,
    pub sample_rate: u32,
    /// Longest supported utterance in frames, `Lmax`.
    pub pe_max_len: usize,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 12,
            hidden: 192,
            bottleneck: 16,
            ffn: 384,
            encoder_kernel: 5,
            encoder_axis: EncoderAxis::Frequency,
            t_kernel: 5,
            f_kernel: 3,
            groups: 8,
            heads: 4,
            embed_dim: None,
            speakers: 2,
            vtcn_blocks: 5,
            visual_dim: 512,
            dropout: 0.0,
            win_length: 512,
            sample_rate: 16_000,
            pe_max_len: 2000,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
            precision: Precision::Double,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for the learnability check.
    pub fn toy() -> Self {
        ModelConfig {
            blocks: 2,
            hidden: 32,
            bottleneck: 8,
            ffn: 64,
            heads: 2,
            visual_dim: 32,
            win_length: 64,
            pe_max_len: 512,
            precision: Precision::Single,
            ..Self::default()
        }
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            win_length: self.win_length,
            hop: self.win_length / 2,
        }
    }

    /// Frequency bins `F`.
    pub fn bins(&self) -> usize {
        self.win_length / 2 + 1
    }

    /// `E`, defaulting to `ceil(512 / F)`.
    pub fn embed(&self) -> usize {
        self.embed_dim.unwrap_or_else(|| 512usize.div_ceil(self.bins()))
    }

    /// Output channels of the global attention input convolution, `L(2E + H/L)`.
    pub fn gmhsa_channels(&self) -> usize {
        self.heads * (2 * self.embed() + self.hidden / self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("hidden", self.hidden),
            ("bottleneck", self.bottleneck),
            ("ffn", self.ffn),
            ("encoder_kernel", self.encoder_kernel),
            ("t_kernel", self.t_kernel),
            ("f_kernel", self.f_kernel),
            ("groups", self.groups),
            ("heads", self.heads),
            ("speakers", self.speakers),
            ("visual_dim", self.visual_dim),
            ("pe_max_len", self.pe_max_len),
            ("sample_rate", self.sample_rate as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, k) in [
            ("encoder_kernel", self.encoder_kernel),
            ("t_kernel", self.t_kernel),
            ("f_kernel", self.f_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if self.hidden % self.groups != 0 || self.ffn % self.groups != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) and ffn ({}) must be divisible by groups ({})",
                self.hidden, self.ffn, self.groups
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.embed_dim == Some(0) {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.norm_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("norm_eps must be positive and bn_momentum in (0, 1]".into()));
        }
        self.stft().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_reference_shapes() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.bins(), 257);
        assert_eq!(c.embed(), 2);
        assert_eq!(c.gmhsa_channels(), 208);
    }

    #[test]
    fn toy_is_valid() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.bins(), 33);
        assert_eq!(c.embed(), 16);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"hiden": 3}"#).is_err());
        let c: ModelConfig = serde_json::from_str(r#"{"hidden": 64}"#).unwrap();
        assert_eq!(c.hidden, 64);
        assert_eq!(c.blocks, 12);
    }
}
