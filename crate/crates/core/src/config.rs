//! Model and run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CurationConfig, LengthMeasure};
use crate::gme::{EnsembleMode, EnsembleWeights};
use crate::masking::MaskPolicy;
use crate::retrieval::DEFAULT_CONTEXT_BUDGET;
use crate::text::MAX_SEQ_LEN;

/// Layer counts the paralleled-layer depth is searched over.
pub const LAYER_SEARCH: [usize; 4] = [1, 2, 3, 4];
pub const DEFAULT_GRID: usize = 14;
pub const DEFAULT_HEADS: usize = 8;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MOCA_SEED";

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Sequence length N shared by every modality after alignment.
    pub seq_len: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Paralleled layers per guided-attention block.
    pub layers: usize,
    /// Self-attention blocks in the toy text encoder.
    pub encoder_blocks: usize,
    /// Diagrams are cut into `grid × grid` patches.
    pub grid: usize,
    /// Pixel side of one patch.
    pub patch_size: usize,
    pub channels: usize,
    /// Split `d_model` across heads instead of running every head at full width.
    pub head_split: bool,
    /// Use an all-zero instructional-diagram feature when a DMC record has none.
    pub zero_id_placeholder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: MAX_SEQ_LEN,
            d_model: 64,
            heads: DEFAULT_HEADS,
            layers: 2,
            encoder_blocks: 1,
            grid: DEFAULT_GRID,
            patch_size: 2,
            channels: 3,
            head_split: false,
            zero_id_placeholder: false,
        }
    }
}

impl ModelConfig {
    /// Number of diagram patches P.
    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Pixel side diagrams are resized to.
    pub fn image_side(&self) -> usize {
        self.grid * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        if self.head_split {
            self.d_model / self.heads
        } else {
            self.d_model
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("grid", self.grid),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError(format!("{name} must be >= 1")));
        }
        if !LAYER_SEARCH.contains(&self.layers) {
            return Err(ConfigError(format!(
                "layers must be one of {LAYER_SEARCH:?}, got {}",
                self.layers
            )));
        }
        if self.seq_len < 5 {
            return Err(ConfigError(
                "seq_len must leave room for [CLS] and three [SEP]".into(),
            ));
        }
        if self.head_split && !self.d_model.is_multiple_of(self.heads) {
            return Err(ConfigError(format!(
                "head_split needs d_model ({}) divisible by heads ({})",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Toy training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            learning_rate: 0.05,
        }
    }
}

/// Serializable view of [`CurationConfig`]; the stopword list is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationSettings {
    pub delta: f64,
    pub top_k: usize,
    pub target_fraction: Option<f64>,
    pub max_iterations: usize,
    pub length_measure: LengthMeasure,
}

impl Default for CurationSettings {
    fn default() -> Self {
        let c = CurationConfig::default();
        Self {
            delta: c.delta,
            top_k: c.top_k,
            target_fraction: c.target_fraction,
            max_iterations: c.max_iterations,
            length_measure: c.length_measure,
        }
    }
}

impl CurationSettings {
    pub fn to_config(&self) -> CurationConfig {
        CurationConfig {
            delta: self.delta,
            top_k: self.top_k,
            target_fraction: self.target_fraction,
            max_iterations: self.max_iterations,
            length_measure: self.length_measure,
            ..CurationConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub diagrams: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub ensemble: EnsembleWeights,
    pub ensemble_mode: EnsembleMode,
    pub retrieval_budget: usize,
    pub mask: MaskPolicy,
    pub curation: CurationSettings,
    pub train: TrainSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            ensemble: EnsembleWeights::default(),
            ensemble_mode: EnsembleMode::Feature,
            retrieval_budget: DEFAULT_CONTEXT_BUDGET,
            mask: MaskPolicy::default(),
            curation: CurationSettings::default(),
            train: TrainSettings::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.ensemble
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.mask
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        if self.retrieval_budget == 0 {
            return Err(ConfigError("retrieval_budget must be >= 1".into()));
        }
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(ConfigError(
                "train.steps and train.batch_size must be >= 1".into(),
            ));
        }
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            return Err(ConfigError(
                "train.learning_rate must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Replaces the seed with `MOCA_SEED` when that variable is set.
    pub fn apply_seed_override(&mut self, env_value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(v) = env_value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ConfigError(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let m = ModelConfig::default();
        assert_eq!((m.seq_len, m.num_patches(), m.heads), (180, 196, 8));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "model": {"d_model": 16}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.ensemble.mu, 0.6);
    }

    #[test]
    fn rejects_bad_layers_and_unknown_fields() {
        assert!(RunConfig::from_json(r#"{"model": {"layers": 5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"ensemble": {"mu": 1.5}}"#).is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed_override(Some("42")).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(cfg.apply_seed_override(Some("x")).is_err());
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.ensemble.mu = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
