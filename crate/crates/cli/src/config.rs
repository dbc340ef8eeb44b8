//! Run configuration file: model, training and corpus settings in one JSON
//! object. Every section is optional and falls back to its defaults; unknown
//! keys are rejected at every level.

use std::path::Path;

use avsep::model::ModelConfig;
use avsep::synth::CorpusConfig;
use avsep::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if self.corpus.visual_dim != self.model.visual_dim || self.corpus.speakers != self.model.speakers {
            return Err(Failure::config(format!(
                "corpus has {} speakers with {}-dim embeddings, model expects {} and {}",
                self.corpus.speakers, self.corpus.visual_dim, self.model.speakers, self.model.visual_dim
            )));
        }
        if self.corpus.sample_rate != self.model.sample_rate {
            return Err(Failure::config(format!(
                "corpus sample rate {} differs from the model's {}",
                self.corpus.sample_rate, self.model.sample_rate
            )));
        }
        Ok(())
    }
}

/// Parses `"lo,hi"`.
pub fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected \"lo,hi\", got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_default_and_unknown_keys_fail() {
        let c: RunConfig = serde_json::from_str(r#"{"model": {"blocks": 3}}"#).unwrap();
        assert_eq!(c.model.blocks, 3);
        assert_eq!(c.train, TrainConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("-5,5"), Ok((-5.0, 5.0)));
        assert_eq!(parse_range(" 5 , -5"), Ok((5.0, -5.0)));
        assert!(parse_range("5").is_err());
        assert!(parse_range("a,1").is_err());
    }

    #[test]
    fn shipped_configs() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let default = RunConfig::load(Some(&dir.join("default.json"))).unwrap();
        assert_eq!(default, RunConfig::default());
        let toy = RunConfig::load(Some(&dir.join("toy.json"))).unwrap();
        toy.validate().unwrap();
        assert_eq!(toy.model, avsep::model::ModelConfig::toy());
    }

    #[test]
    fn mismatched_sections_rejected() {
        let mut c = RunConfig::default();
        c.corpus.visual_dim = 32;
        assert_eq!(c.validate().unwrap_err().code, 2);
    }
}
