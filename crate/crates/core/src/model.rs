//! Full parameter set: text encoder, multimodal attention and option scorer.

use std::path::Path;

use crate::cgma::{CgmaParams, ParamInit, TextEncoder};
use crate::config::{ConfigError, ModelConfig};
use crate::numerics::{NumericsError, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Linear scorer applied to the pooled `[CLS]` row.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MocaModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: TextEncoder,
    pub cgma: CgmaParams,
    pub classifier: Classifier,
}

impl<T: Scalar> MocaModel<T> {
    /// Freshly initialized parameters; identical for identical arguments.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(ConfigError("vocab_size must be >= 1".into()));
        }
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, seed);
        let encoder = TextEncoder::init(&mut init, &config, vocab_size);
        let cgma = CgmaParams::init(&mut init, &config);
        let classifier = Classifier {
            w: init.uniform("cls.w", config.d_model, 1),
            b: init.filled("cls.b", 1, 1, 0.0),
        };
        Ok(Self {
            config,
            store,
            encoder,
            cgma,
            classifier,
        })
    }

    /// Replaces every parameter with the contents of a `MOCA1` file whose
    /// names and shapes match this model.
    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<(), NumericsError> {
        self.store.load(path)
    }

    pub fn save_params(&self, path: impl AsRef<Path>) -> Result<(), NumericsError> {
        self.store.save(path)
    }
}
